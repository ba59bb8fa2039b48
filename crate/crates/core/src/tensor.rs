//! Dense row-major tensors and the raw kernels behind the tape operations.

use std::fmt;

use thiserror::Error;

/// Scalar type used by every tensor in the build.
///
/// 32-bit by default; the `f64` feature switches the whole crate to 64-bit.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

/// Name of the scalar type, as written into checkpoint headers.
#[cfg(not(feature = "f64"))]
pub const SCALAR_NAME: &str = "f32";
#[cfg(feature = "f64")]
pub const SCALAR_NAME: &str = "f64";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("index {index} out of range for {op} with {bound} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Scalar>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: Scalar) -> Result<Self> {
        let numel = check_shape(shape)?;
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: Scalar) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<Scalar>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the first dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all dimensions after the first.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item(&self) -> Option<Scalar> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

pub(crate) fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a rank-{rank} tensor"),
        });
    }
    Ok(())
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

// Kernels. All reductions run sequentially in row-major order so results are
// bit-reproducible; the matmul family accumulates over the inner index in
// increasing order starting from zero.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn matmul_tn_acc(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row; entries with `keep == false` are 0.
pub(crate) fn softmax_row(x: &[Scalar], keep: Option<&[bool]>, out: &mut [Scalar]) -> bool {
    let kept = |j: usize| keep.map_or(true, |k| k[j]);
    let mut max = Scalar::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if kept(j) && v > max {
            max = v;
        }
    }
    if max == Scalar::NEG_INFINITY && !(0..x.len()).any(kept) {
        return false;
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if kept(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if kept(j) {
            *o /= sum;
        }
    }
    true
}

/// Row log-softmax: x - max - ln Σ exp(x - max).
pub(crate) fn log_softmax_row(x: &[Scalar], out: &mut [Scalar]) {
    let max = x.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length_and_dims() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.row_len(), 3);
        assert_eq!(t.rows(), 2);
    }

    #[test]
    fn softmax_row_masks_and_detects_empty() {
        let mut out = [0.0; 3];
        assert!(softmax_row(&[1.0, 2.0, 3.0], Some(&[true, false, true]), &mut out));
        assert_eq!(out[1], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-12);
        assert!(!softmax_row(&[1.0, 2.0, 3.0], Some(&[false; 3]), &mut out));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0).is_finite());
        assert!((sigmoid(1000.0) - 1.0).abs() < 1e-12);
    }
}
