//! Dense row-major tensors with a reverse-mode autodiff tape.
//!
//! [`Tensor`] is an immutable value. Differentiable computation happens on a
//! [`Tape`]: inputs are registered as leaves, every operation records its
//! output together with a backward rule, and [`Tape::backward`] replays the
//! records in reverse. Every operation rejects non-finite outputs with an error
//! naming the operation.

mod conv;
mod gradcheck;
mod io;
mod ops;
pub use ops::{softmax_rows, BatchStats};
mod rng;
mod scalar;
mod tape;

pub use conv::{conv2d_forward_raw, ConvGeometry};
pub use gradcheck::{grad_check, grad_check_inputs, GradCheckReport};
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tape::{BackwardCtx, BackwardFn, Tape, Var};

use crate::error::{Error, Result};

/// A dense n-dimensional array stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, validating the shape against the buffer length and
    /// rejecting non-finite scalars.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {numel} scalars, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: format!("tensor construction (index {pos})") });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for buffers whose shape and finiteness were
    /// already established by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Row-major tensor from a slice of f64 values, cast to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::from_f64(v.as_f64())).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Replace the element buffer, keeping the shape. Fails on length change
    /// or non-finite input.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.shape.clone(), data)
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
        })
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Scalar>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}
