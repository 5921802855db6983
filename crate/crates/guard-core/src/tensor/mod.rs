//! Dense f64 tensors and a reverse-mode autodiff engine that can
//! differentiate through its own gradients (needed because the curvature
//! penalty contains input gradients and is itself differentiated with
//! respect to parameters).
//!
//! Layout is row-major with explicit shapes; the only broadcasting is
//! scalar-tensor. A rank-0 shape (`[]`) denotes a scalar with one element.

pub mod check;
pub mod io;
pub mod mem;
pub mod rng;
pub mod tape;

mod kernels;

pub use check::grad_check;
pub use rng::Rng;
pub use tape::{grad, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?} (expected {numel})")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        numel: usize,
    },
    #[error("gradient target must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this record")]
    ForeignVar,
    #[error("gradients are only taken with respect to record inputs")]
    NotAnInput,
    #[error("record depth {depth} does not allow differentiating a produced gradient")]
    DepthExceeded { depth: u8 },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid tensor container: {0}")]
    Format(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Tracked storage so the harness can report allocator high-water marks.
#[derive(Debug)]
struct Buffer(Vec<f64>);

impl Buffer {
    fn new(data: Vec<f64>) -> Self {
        mem::on_alloc(data.len() * 8);
        Buffer(data)
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        mem::on_free(self.0.len() * 8);
    }
}

/// Dense n-dimensional array of 64-bit floats.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.0 == other.data.0
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, validating that the data length matches the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> TensorResult<Self> {
        let numel = numel_of(shape);
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
                numel,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Buffer::new(data),
        })
    }

    /// Like [`Tensor::new`] but additionally rejects NaN/Inf entries.
    pub fn new_checked(shape: &[usize], data: Vec<f64>) -> TensorResult<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "construct" });
        }
        Tensor::new(shape, data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Buffer::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![1.0; numel_of(shape)])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![v; numel_of(shape)])
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let mut data = vec![0.0; numel_of(shape)];
        rng.fill_uniform(&mut data, lo, hi);
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        let mut data = vec![0.0; numel_of(shape)];
        rng.fill_normal(&mut data, mean, std);
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.0.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data.0
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data.0
    }

    pub fn into_data(self) -> Vec<f64> {
        let mut me = self;
        let data = std::mem::take(&mut me.data.0);
        mem::on_free(data.len() * 8);
        data
    }

    /// Scalar value of a rank-0/1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data.0[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.0.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> TensorResult<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.0.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> TensorResult<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .0
                .iter()
                .zip(other.data.0.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn axpy(&self, alpha: f64, other: &Tensor) -> TensorResult<Tensor> {
        self.zip(other, "axpy", |a, b| a + alpha * b)
    }

    pub fn dot(&self, other: &Tensor) -> TensorResult<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .0
            .iter()
            .zip(other.data.0.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.0.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Row `i` of a rank >= 1 tensor as a tensor with the leading axis removed.
    pub fn slice_first(&self, i: usize) -> Tensor {
        assert!(!self.shape.is_empty() && i < self.shape[0]);
        let stride = numel_of(&self.shape[1..]);
        let data = self.data.0[i * stride..(i + 1) * stride].to_vec();
        Tensor::from_parts(self.shape[1..].to_vec(), data)
    }

    /// Gathers rows along the leading axis.
    pub fn select_first(&self, indices: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty());
        let stride = numel_of(&self.shape[1..]);
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data.0[i * stride..(i + 1) * stride]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape[1..]);
        Tensor::from_parts(shape, data)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> TensorResult<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch {
            op: "stack",
            detail: "empty input".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", first.shape, p.shape),
                });
            }
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn checked_rejects_non_finite() {
        let err = Tensor::new_checked(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(4.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn slice_and_stack_round_trip() {
        let t = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows: Vec<Tensor> = (0..3).map(|i| t.slice_first(i)).collect();
        assert_eq!(rows[1].data(), &[3.0, 4.0]);
        let back = Tensor::stack(&rows).unwrap();
        assert_eq!(back, t);
    }
}
