//! Tape-based reverse-mode differentiation.
//!
//! Every arithmetic method on [`Tensor`] lives here. When at least one
//! operand is attached to a [`Tape`], the operation is recorded as a node;
//! [`Tape::backward`] then replays the node list in reverse, accumulating
//! gradients into every attached tensor. Detached operands are promoted to
//! constant leaves on the fly, so mixed traced/untraced expressions work
//! without ceremony.
//!
//! A tape is confined to a single thread (`Rc` inside). Independent tapes
//! can run in parallel. Captured values inside nodes are stored detached,
//! which keeps the graph acyclic and lets buffers be shared cheaply.
//!
//! Broadcasting is deliberately minimal: elementwise ops require equal
//! shapes, except [`Tensor::add_bias`] and [`Tensor::mul_row`], which
//! broadcast a trailing vector over the leading batch axis.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::spline::KnotGrid;
use crate::tensor::{
    matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, sigmoid_scalar, silu_scalar, Result,
    Tensor, TensorError,
};

/// Handle from a traced tensor back to its node on the tape.
#[derive(Clone)]
pub(crate) struct Trace {
    pub(crate) tape: Tape,
    pub(crate) node: usize,
}

/// Recording of a primitive operation: input handles plus whatever forward
/// values its backward rule needs. Captured tensors are always detached.
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul {
        a: usize,
        b: usize,
        a_val: Tensor,
        b_val: Tensor,
    },
    /// `[m x n] + [n]`, bias broadcast over the leading (batch) axis.
    AddBias {
        a: usize,
        bias: usize,
        width: usize,
    },
    /// `[m x n] * [n]` elementwise, vector broadcast over the batch axis.
    MulRow {
        a: usize,
        v: usize,
        a_val: Tensor,
        v_val: Tensor,
    },
    Matmul {
        a: usize,
        b: usize,
        a_val: Tensor,
        b_val: Tensor,
    },
    /// `a * b^T` with `b` stored `[n x k]`.
    MatmulNT {
        a: usize,
        b: usize,
        a_val: Tensor,
        b_val: Tensor,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    AddScalar {
        a: usize,
    },
    Sigmoid {
        a: usize,
        out: Tensor,
    },
    Tanh {
        a: usize,
        out: Tensor,
    },
    Silu {
        a: usize,
        input: Tensor,
    },
    Sum {
        a: usize,
        in_len: usize,
    },
    Mean {
        a: usize,
        in_len: usize,
    },
    Reshape {
        a: usize,
    },
    /// Column-wise concatenation of rank-2 parts: `(node, width)` each.
    ConcatCols {
        parts: Vec<(usize, usize)>,
    },
    /// `[b x t x d] -> [b x d]` slice at a fixed time index.
    SliceTime {
        a: usize,
        t: usize,
        in_shape: [usize; 3],
    },
    /// Stacks `t` tensors of shape `[rows x width]` into `[rows x t x width]`.
    StackTime {
        parts: Vec<usize>,
        rows: usize,
        width: usize,
    },
    /// B-spline basis expansion `[m x n] -> [m x n x r]`.
    SplineBasis {
        a: usize,
        grid: KnotGrid,
        input: Tensor,
    },
}

struct Node {
    op: Op,
}

#[derive(Default)]
struct TapeCore {
    nodes: Vec<Node>,
}

/// Gradient tape: an ordered record of primitive operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeCore>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op) -> usize {
        let mut core = self.inner.borrow_mut();
        core.nodes.push(Node { op });
        core.nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Attaches a tensor to this tape as a differentiable leaf and returns
    /// the attached copy. Gradients accumulate into leaves during
    /// [`Tape::backward`].
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let node = self.push(Op::Leaf);
        let mut out = t.detached();
        out.trace = Some(Trace {
            tape: self.clone(),
            node,
        });
        out
    }

    /// Node id for an operand, promoting untraced constants to leaves.
    fn operand(&self, t: &Tensor) -> usize {
        match &t.trace {
            Some(tr) => tr.node,
            None => self.push(Op::Leaf),
        }
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients,
    /// queryable through any tensor attached to this tape. Gradients sum
    /// over every use of a node, so a parameter reused across timesteps
    /// accumulates one contribution per use.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let trace = loss.trace.as_ref().ok_or(TensorError::LossNotOnTape)?;
        if !self.same_tape(&trace.tape) {
            return Err(TensorError::LossNotOnTape);
        }
        if loss.len() != 1 {
            return Err(TensorError::LossNotScalar {
                shape: loss.shape().to_vec(),
            });
        }

        let core = self.inner.borrow();
        let n = core.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[trace.node] = Some(vec![1.0]);

        for id in (0..n).rev() {
            // Leaves keep their accumulated gradient for later queries;
            // interior nodes give theirs up to their inputs.
            let g = match &core.nodes[id].op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &core.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc_scaled(&mut grads, *b, &g, -1.0);
                }
                Op::Mul { a, b, a_val, b_val } => {
                    acc_mul(&mut grads, *a, &g, b_val.data());
                    acc_mul(&mut grads, *b, &g, a_val.data());
                }
                Op::AddBias { a, bias, width } => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *bias, &colsum(&g, *width));
                }
                Op::MulRow { a, v, a_val, v_val } => {
                    let w = v_val.len();
                    let rows = a_val.len() / w;
                    let mut ga = vec![0.0; a_val.len()];
                    let mut gv = vec![0.0; w];
                    for r in 0..rows {
                        let base = r * w;
                        for c in 0..w {
                            ga[base + c] = g[base + c] * v_val.data()[c];
                            gv[c] += g[base + c] * a_val.data()[base + c];
                        }
                    }
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *v, &gv);
                }
                Op::Matmul { a, b, a_val, b_val } => {
                    let (m, k) = (a_val.shape()[0], a_val.shape()[1]);
                    let n_cols = b_val.shape()[1];
                    // dA = dY B^T ; dB = A^T dY
                    let ga = matmul_nt_kernel(&g, b_val.data(), m, n_cols, k);
                    let gb = matmul_tn_kernel(a_val.data(), &g, m, k, n_cols);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::MatmulNT { a, b, a_val, b_val } => {
                    let (m, k) = (a_val.shape()[0], a_val.shape()[1]);
                    let n_rows = b_val.shape()[0];
                    // Y = A B^T with B [n x k]: dA = dY B ; dB = dY^T A
                    let ga = matmul_kernel(&g, b_val.data(), m, n_rows, k);
                    let gb = matmul_tn_kernel(&g, a_val.data(), m, n_rows, k);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::Scale { a, factor } => {
                    acc_scaled(&mut grads, *a, &g, *factor);
                }
                Op::AddScalar { a } => {
                    acc(&mut grads, *a, &g);
                }
                Op::Sigmoid { a, out } => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Tanh { a, out } => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Silu { a, input } => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(input.data())
                        .map(|(&gv, &x)| {
                            let s = sigmoid_scalar(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Sum { a, in_len } => {
                    acc(&mut grads, *a, &vec![g[0]; *in_len]);
                }
                Op::Mean { a, in_len } => {
                    acc(&mut grads, *a, &vec![g[0] / *in_len as f64; *in_len]);
                }
                Op::Reshape { a } => {
                    acc(&mut grads, *a, &g);
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(|&(_, w)| w).sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &(part_id, w) in parts {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(&mut grads, part_id, &gp);
                        offset += w;
                    }
                }
                Op::SliceTime { a, t, in_shape } => {
                    let [b, steps, d] = *in_shape;
                    let mut ga = vec![0.0; b * steps * d];
                    for r in 0..b {
                        ga[(r * steps + t) * d..(r * steps + t + 1) * d]
                            .copy_from_slice(&g[r * d..(r + 1) * d]);
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::StackTime { parts, rows, width } => {
                    let steps = parts.len();
                    for (t, &part_id) in parts.iter().enumerate() {
                        let mut gp = vec![0.0; rows * width];
                        for r in 0..*rows {
                            gp[r * width..(r + 1) * width].copy_from_slice(
                                &g[(r * steps + t) * width..(r * steps + t + 1) * width],
                            );
                        }
                        acc(&mut grads, part_id, &gp);
                    }
                }
                Op::SplineBasis { a, grid, input } => {
                    let r = grid.num_bases();
                    let mut deriv = vec![0.0; r];
                    let mut ga = vec![0.0; input.len()];
                    for (i, &x) in input.data().iter().enumerate() {
                        grid.basis_deriv_into(x, &mut deriv);
                        let grow = &g[i * r..(i + 1) * r];
                        let mut acc_x = 0.0;
                        for (gv, dv) in grow.iter().zip(&deriv) {
                            acc_x += gv * dv;
                        }
                        ga[i] = acc_x;
                    }
                    acc(&mut grads, *a, &ga);
                }
            }
        }

        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, &v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => grads[id] = Some(g.to_vec()),
    }
}

fn acc_scaled(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64], factor: f64) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, &v) in existing.iter_mut().zip(g) {
                *e += factor * v;
            }
        }
        None => grads[id] = Some(g.iter().map(|&v| factor * v).collect()),
    }
}

fn acc_mul(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64], other: &[f64]) {
    match &mut grads[id] {
        Some(existing) => {
            for ((e, &gv), &ov) in existing.iter_mut().zip(g).zip(other) {
                *e += gv * ov;
            }
        }
        None => grads[id] = Some(g.iter().zip(other).map(|(&gv, &ov)| gv * ov).collect()),
    }
}

fn colsum(g: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for row in g.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Result of a reverse pass: one gradient per tape node.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` is attached to the
    /// tape this gradient set came from and received a contribution.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let trace = t.trace.as_ref()?;
        if !self.tape.same_tape(&trace.tape) {
            return None;
        }
        self.grads[trace.node]
            .as_ref()
            .map(|g| Tensor::from_parts(t.shape().to_vec(), Arc::new(g.clone())))
    }
}

// ---------------------------------------------------------------------------
// Recorded operations
// ---------------------------------------------------------------------------

/// Resolves the tape shared by a set of operands. Mixing two distinct tapes
/// in one operation is a contract violation.
fn joint_tape<'a, I>(op: &'static str, operands: I) -> Result<Option<Tape>>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut found: Option<Tape> = None;
    for t in operands {
        if let Some(trace) = &t.trace {
            match &found {
                None => found = Some(trace.tape.clone()),
                Some(tape) if tape.same_tape(&trace.tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch { op }),
            }
        }
    }
    Ok(found)
}

impl Tensor {
    fn traced(mut self, tape: &Tape, node: usize) -> Tensor {
        self.trace = Some(Trace {
            tape: tape.clone(),
            node,
        });
        self
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("add", [self, other])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Add(tape.operand(self), tape.operand(other)));
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Elementwise difference of equally shaped tensors.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("sub", [self, other])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Sub(tape.operand(self), tape.operand(other)));
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("mul", [self, other])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Mul {
                    a: tape.operand(self),
                    b: tape.operand(other),
                    a_val: self.detached(),
                    b_val: other.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// `[m x n] + [n]`: adds a bias vector to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("add_bias")?;
        if bias.rank() != 1 || bias.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("add_bias", [self, bias])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::AddBias {
                    a: tape.operand(self),
                    bias: tape.operand(bias),
                    width: n,
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// `[m x n] * [n]`: scales every row elementwise by a vector.
    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("mul_row")?;
        if v.rank() != 1 || v.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, &s) in row.iter_mut().zip(v.data()) {
                *x *= s;
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("mul_row", [self, v])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::MulRow {
                    a: tape.operand(self),
                    v: tape.operand(v),
                    a_val: self.detached(),
                    v_val: v.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Matrix product `[m x k] * [k x n] -> [m x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = matmul_kernel(self.data(), other.data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], Arc::new(data));
        match joint_tape("matmul", [self, other])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Matmul {
                    a: tape.operand(self),
                    b: tape.operand(other),
                    a_val: self.detached(),
                    b_val: other.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// `self * other^T` with `other` stored `[n x k]`: `[m x k] -> [m x n]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = matmul_nt_kernel(self.data(), other.data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], Arc::new(data));
        match joint_tape("matmul_nt", [self, other])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::MatmulNT {
                    a: tape.operand(self),
                    b: tape.operand(other),
                    a_val: self.detached(),
                    b_val: other.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let data: Vec<f64> = self.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("scale", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Scale {
                    a: tape.operand(self),
                    factor,
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "add_scalar" });
        }
        let data: Vec<f64> = self.data().iter().map(|&v| v + value).collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("add_scalar", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::AddScalar {
                    a: tape.operand(self),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Elementwise logistic function; outputs lie strictly in (0, 1).
    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("sigmoid", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Sigmoid {
                    a: tape.operand(self),
                    out: out.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Elementwise hyperbolic tangent; outputs lie in (-1, 1).
    pub fn tanh(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| v.tanh()).collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("tanh", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Tanh {
                    a: tape.operand(self),
                    out: out.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Elementwise silu (x * sigmoid(x)), the residual base activation of
    /// the KAN layers.
    pub fn silu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| silu_scalar(v)).collect();
        let out = Tensor::from_parts(self.shape().to_vec(), Arc::new(data));
        match joint_tape("silu", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Silu {
                    a: tape.operand(self),
                    input: self.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let out = Tensor::scalar(total);
        match joint_tape("sum", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Sum {
                    a: tape.operand(self),
                    in_len: self.len(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Arithmetic mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(TensorError::Contract {
                op: "mean",
                what: "empty tensor".to_string(),
            });
        }
        let total: f64 = self.data().iter().sum();
        let out = Tensor::scalar(total / self.len() as f64);
        match joint_tape("mean", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Mean {
                    a: tape.operand(self),
                    in_len: self.len(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.len(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), Arc::clone(self.buffer()));
        match joint_tape("reshape", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::Reshape {
                    a: tape.operand(self),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_cols",
                what: "no parts given".to_string(),
            });
        }
        let (rows, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, w) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], Arc::new(data));
        match joint_tape("concat_cols", parts.iter().copied())? {
            None => Ok(out),
            Some(tape) => {
                let recorded: Vec<(usize, usize)> = parts
                    .iter()
                    .zip(&widths)
                    .map(|(p, &w)| (tape.operand(p), w))
                    .collect();
                let node = tape.push(Op::ConcatCols { parts: recorded });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// `[b x t x d] -> [b x d]`: extracts timestep `t`.
    pub fn slice_time(&self, t: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "slice_time",
                expected: 3,
                shape: self.shape().to_vec(),
            });
        }
        let [b, steps, d] = [self.shape()[0], self.shape()[1], self.shape()[2]];
        if t >= steps {
            return Err(TensorError::Contract {
                op: "slice_time",
                what: format!("timestep {t} out of range ({steps} steps)"),
            });
        }
        let mut data = Vec::with_capacity(b * d);
        for r in 0..b {
            data.extend_from_slice(&self.data()[(r * steps + t) * d..(r * steps + t + 1) * d]);
        }
        let out = Tensor::from_parts(vec![b, d], Arc::new(data));
        match joint_tape("slice_time", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::SliceTime {
                    a: tape.operand(self),
                    t,
                    in_shape: [b, steps, d],
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// Stacks equally shaped `[b x d]` tensors into `[b x t x d]`.
    pub fn stack_time(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "stack_time",
                what: "no parts given".to_string(),
            });
        }
        let (rows, width) = parts[0].dims2("stack_time")?;
        for p in parts {
            p.check_same_shape(&parts[0], "stack_time")?;
        }
        let steps = parts.len();
        let mut data = vec![0.0; rows * steps * width];
        for (t, p) in parts.iter().enumerate() {
            for r in 0..rows {
                data[(r * steps + t) * width..(r * steps + t + 1) * width]
                    .copy_from_slice(&p.data()[r * width..(r + 1) * width]);
            }
        }
        let out = Tensor::from_parts(vec![rows, steps, width], Arc::new(data));
        match joint_tape("stack_time", parts.iter())? {
            None => Ok(out),
            Some(tape) => {
                let recorded: Vec<usize> = parts.iter().map(|p| tape.operand(p)).collect();
                let node = tape.push(Op::StackTime {
                    parts: recorded,
                    rows,
                    width,
                });
                Ok(out.traced(&tape, node))
            }
        }
    }

    /// B-spline basis expansion: `[m x n] -> [m x n x r]` where `r` is the
    /// number of basis functions of `grid`. Differentiable with respect to
    /// the input through the basis derivative.
    pub fn spline_basis(&self, grid: &KnotGrid) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "spline_basis",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let r = grid.num_bases();
        let mut data = vec![0.0; self.len() * r];
        for (i, &x) in self.data().iter().enumerate() {
            grid.basis_into(x, &mut data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape().to_vec();
        shape.push(r);
        let out = Tensor::from_parts(shape, Arc::new(data));
        match joint_tape("spline_basis", [self])? {
            None => Ok(out),
            Some(tape) => {
                let node = tape.push(Op::SplineBasis {
                    a: tape.operand(self),
                    grid: grid.clone(),
                    input: self.detached(),
                });
                Ok(out.traced(&tape, node))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::eye(2);
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = i2.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 3]);
        let b = t2(3, 4, &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let out = z.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        let x = Tensor::from_vec(vec![3], vec![0.0, 50.0, -3.2]).unwrap();
        let y = x.sigmoid().unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        let neg = x.scale(-1.0).unwrap().sigmoid().unwrap();
        for (a, b) in y.data().iter().zip(neg.data()) {
            assert!((a + b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_matches_reference_and_is_odd() {
        let x = Tensor::from_vec(vec![2], vec![0.0, 0.25]).unwrap();
        let y = x.tanh().unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.2449186624).abs() < 1e-9);
        let yn = x.scale(-1.0).unwrap().tanh().unwrap();
        for (a, b) in y.data().iter().zip(yn.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(0.0));
        let loss = x.sigmoid().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        assert!((gx.item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_linear_map_gives_ones() {
        let tape = Tape::new();
        let w = tape.watch(&t2(3, 3, &[0.3; 9]));
        let loss = Tensor::eye(3).matmul(&w).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gw = grads.get(&w).unwrap();
        assert!(gw.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.watch(&t2(2, 2, &[1.0; 4]));
        let y = x.sigmoid().unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::LossNotScalar { .. })
        ));
    }

    #[test]
    fn backward_requires_loss_on_tape() {
        let tape = Tape::new();
        let _ = tape.watch(&Tensor::scalar(1.0));
        let loose = Tensor::scalar(2.0);
        assert!(matches!(
            tape.backward(&loose),
            Err(TensorError::LossNotOnTape)
        ));
        let other = Tape::new();
        let on_other = other.watch(&Tensor::scalar(2.0));
        assert!(matches!(
            tape.backward(&on_other),
            Err(TensorError::LossNotOnTape)
        ));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = sum(x) + sum(x) => dloss/dx = 2 everywhere.
        let tape = Tape::new();
        let x = tape.watch(&t2(1, 2, &[0.4, -0.7]));
        let s1 = x.sum().unwrap();
        let s2 = x.sum().unwrap();
        let loss = s1.add(&s2).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx.data(), &[2.0, 2.0]);
    }

    #[test]
    fn reuse_equals_sum_of_single_use_gradients() {
        // Using one parameter at T "timesteps" accumulates the same gradient
        // as the sum over T duplicated parameters used once each.
        let steps = 4;
        let xv = t2(1, 3, &[0.2, -0.1, 0.9]);
        let wv = t2(3, 3, &(0..9).map(|i| 0.1 * i as f64 - 0.3).collect::<Vec<_>>());

        let tape = Tape::new();
        let w = tape.watch(&wv);
        let mut h = xv.detached();
        for _ in 0..steps {
            h = h.matmul(&w).unwrap().tanh().unwrap();
        }
        let loss = h.sum().unwrap();
        let g_shared = tape.backward(&loss).unwrap().get(&w).unwrap();

        let tape2 = Tape::new();
        let copies: Vec<Tensor> = (0..steps).map(|_| tape2.watch(&wv)).collect();
        let mut h = xv.detached();
        for c in &copies {
            h = h.matmul(c).unwrap().tanh().unwrap();
        }
        let loss = h.sum().unwrap();
        let grads = tape2.backward(&loss).unwrap();
        let mut total = vec![0.0; 9];
        for c in &copies {
            for (t, v) in total.iter_mut().zip(grads.get(c).unwrap().data()) {
                *t += v;
            }
        }
        for (a, b) in g_shared.data().iter().zip(&total) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let a_before = a.data().to_vec();
        let b_before = b.data().to_vec();
        let _ = a.add(&b).unwrap();
        let _ = a.mul(&b).unwrap();
        let _ = a.matmul(&b).unwrap();
        let _ = a.sigmoid().unwrap();
        assert_eq!(a.data(), &a_before[..]);
        assert_eq!(b.data(), &b_before[..]);
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2_ = Tape::new();
        let a = t1.watch(&t2(1, 2, &[1.0, 2.0]));
        let b = t2_.watch(&t2(1, 2, &[3.0, 4.0]));
        assert!(matches!(
            a.add(&b),
            Err(TensorError::TapeMismatch { .. })
        ));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[9.0, 8.0]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let stacked = Tensor::stack_time(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(stacked.shape(), &[2, 2, 2]);
        let s1 = stacked.slice_time(1).unwrap();
        assert_eq!(s1.data(), a.data());
    }
}
