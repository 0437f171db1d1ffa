//! Dense row-major float and integer tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("payload length {len} does not match dims {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
    #[error("non-finite element at flat index {0}")]
    NonFinite(usize),
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

/// Real-valued tensor; every element is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatTensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> FloatTensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if numel(&dims) != data.len() {
            return Err(TensorError::LengthMismatch { dims, len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = numel(&dims);
        Self { dims, data: vec![T::zero(); n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FloatTensor<U> {
        FloatTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Integer tensor used by the lowered graph and the integer engine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntTensor {
    dims: Vec<usize>,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn new(dims: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorError> {
        if numel(&dims) != data.len() {
            return Err(TensorError::LengthMismatch { dims, len: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = numel(&dims);
        Self { dims, data: vec![0; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn min_max(&self) -> Option<(i32, i32)> {
        let first = *self.data.first()?;
        Some(self.data.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
    }
}
