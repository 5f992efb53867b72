//! Dense n-dimensional arrays and the scalar abstraction.
//!
//! Training runs in `f32`; gradient checking instantiates the very same
//! graph code at `f64` so finite differences can be trusted to many digits.
//! [`Scalar`] is the small trait that makes that possible: everything numeric
//! in the crate is generic over it, and constants written as `f64` literals
//! enter through [`Scalar::from_f64`].
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer, with an optional
//! gradient buffer of the same shape. There is no view machinery: desk-scale
//! models are small enough that explicit copies are simpler and fast enough.

use crate::error::{Error, Result};
use crate::rng::RngState;
use std::fmt::{Debug, Display};

/// Floating-point scalar the crate's numerics are generic over.
///
/// `f32` for training throughput, `f64` for finite-difference gradient
/// checks. Reductions accumulate in `f64` regardless (see [`Tensor::sum_f64`]).
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a shape and a matching flat buffer.
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength { dims, expected, got: data.len() });
        }
        Ok(Tensor { dims, data, grad: None })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![S::zero(); n], grad: None }
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![S::from_f64(value); n], grad: None }
    }

    /// Tensor whose flat entries come from `f(flat_index)`.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|i| S::from_f64(f(i))).collect();
        Tensor { dims: dims.to_vec(), data, grad: None }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor { dims: vec![1], data: vec![S::from_f64(value)], grad: None }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Flat value as `f64`, for inspection and tests.
    #[inline]
    pub fn at(&self, flat: usize) -> f64 {
        self.data[flat].as_f64()
    }

    /// Gradient buffer, if one has been deposited.
    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Deposit `dloss/dself`. The buffer must match the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<S>) {
        assert_eq!(grad.len(), self.data.len(), "gradient length must match tensor size");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the same buffer under a new shape of equal size.
    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::DataLength {
                dims: dims.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Error if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Fill with independent standard normal draws.
    pub fn fill_normal(&mut self, rng: &mut RngState) {
        for v in &mut self.data {
            *v = S::from_f64(rng.next_normal());
        }
    }

    /// Fill with independent uniform draws from [lo, hi).
    pub fn fill_uniform(&mut self, rng: &mut RngState, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = S::from_f64(rng.uniform(lo, hi));
        }
    }

    /// Convert every entry through `f64` into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Fraction of entries that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let zeros = self.data.iter().filter(|v| **v == S::zero()).count();
        zeros as f64 / self.data.len() as f64
    }
}
