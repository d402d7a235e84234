//! Dense row-major f64 tensors.
//!
//! `Tensor` is the universal value type of this crate: an immutable,
//! cheaply cloneable n-dimensional array. A tensor may carry a handle onto
//! a gradient [`Tape`](crate::tape::Tape); operations record themselves on
//! the tape whenever at least one operand is attached (see `tape.rs`, where
//! all arithmetic methods live).

use std::fmt;
use std::sync::Arc;

use crate::tape::Trace;

/// Errors raised by tensor construction and arithmetic.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: operands are attached to different tapes")]
    TapeMismatch { op: &'static str },
    #[error("loss must be a tape-attached scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("loss tensor is not recorded on this tape")]
    LossNotOnTape,
    #[error("{op}: {what}")]
    Contract { op: &'static str, what: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array of f64 in row-major order.
///
/// Clones share the underlying buffer. The value itself is immutable; every
/// operation allocates a fresh output.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) trace: Option<Trace>,
}

impl Tensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    /// Wraps an existing shared buffer without copying. The length must
    /// match the shape; finiteness is the caller's responsibility.
    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            trace: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![0.0; len]))
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; len]))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), Arc::new(vec![value]))
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], Arc::new(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::Contract {
                op: "item",
                what: format!("tensor of shape {:?} is not a scalar", self.shape),
            })
        }
    }

    /// Element access by multi-index. Test and glue-code convenience.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Copy of the tensor without any tape attachment.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            trace: None,
        }
    }

    pub fn is_traced(&self) -> bool {
        self.trace.is_some()
    }

    /// Gathers rows (leading-axis slices) into a new untraced tensor.
    /// Used for mini-batch assembly.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(TensorError::RankMismatch {
                op: "gather_rows",
                expected: 1,
                shape: self.shape.clone(),
            });
        }
        let rows = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Contract {
                    op: "gather_rows",
                    what: format!("row {i} out of bounds ({rows} rows)"),
                });
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_parts(shape, Arc::new(data)))
    }

    /// Contiguous row range `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() == 0 || end > self.shape[0] || start > end {
            return Err(TensorError::Contract {
                op: "slice_rows",
                what: format!(
                    "range {start}..{end} invalid for shape {:?}",
                    self.shape
                ),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let data = self.data[start * stride..end * stride].to_vec();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(8)])
            .field("traced", &self.trace.is_some())
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. Pure functions over slices; all recording and shape checking
// happens in the callers.
// ---------------------------------------------------------------------------

/// `a [m x k] * b [k x n] -> [m x n]`, ikj loop order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `a [m x k] * b^T` where `b` is `[n x k]` -> `[m x n]` (row dot products).
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// `a^T * b` where `a` is `[m x k]` and `b` is `[m x n]` -> `[k x n]`.
pub(crate) fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_empty_shape_and_unit_len() {
        let s = Tensor::scalar(3.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn gather_rows_copies_leading_slices() {
        let t = Tensor::from_vec(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_kernels_agree_on_random_input() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let plain = matmul_kernel(&a, &b, m, k, n);

        // b^T laid out as [n x k]
        let mut bt = vec![0.0; n * k];
        for r in 0..k {
            for c in 0..n {
                bt[c * k + r] = b[r * n + c];
            }
        }
        let nt = matmul_nt_kernel(&a, &bt, m, k, n);
        assert_eq!(plain, nt);

        // a^T laid out as [k x m]; (a^T)^T * b == a * b
        let mut at = vec![0.0; k * m];
        for r in 0..m {
            for c in 0..k {
                at[c * m + r] = a[r * k + c];
            }
        }
        let tn = matmul_tn_kernel(&at, &b, k, m, n);
        assert_eq!(plain, tn);
    }
}
