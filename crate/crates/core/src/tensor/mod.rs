//! Minimal dense N-dimensional arrays with reverse-mode differentiation.
//!
//! [`Tensor`] is a row-major contiguous array behind an `Arc`, so clones and
//! reshapes are cheap. All learnable computation in the model records onto a
//! [`tape::Tape`], which replays hand-derived backward rules in exact reverse
//! order — gradients are deterministic by construction.

mod kernels;
mod scalar;
pub mod tape;

pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor. Element `(i0, .., i_{r-1})` lives at offset
/// `sum(i_k * stride_k)` with strides derived from the shape. Rank 0 is a
/// scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<[S]>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::BadOperand {
                op: "tensor",
                shape,
                reason: format!("data length {} does not match shape", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel(shape)].into(),
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)].into(),
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value].into(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = numel(shape);
        let data: Vec<S> = (0..n).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data: data.into(),
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Single element of a rank-0 tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::BadOperand {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements as {:?}", self.len(), shape),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of bounds at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Self {
        let mut out = self.data.to_vec();
        crate::exec::fill_indexed(&mut out, |i| f(self.data[i]));
        Self {
            shape: self.shape.clone(),
            data: out.into(),
        }
    }

    /// Convert elements to another scalar type through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64()))
                .collect::<Vec<_>>()
                .into(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.data.iter()
    }
}

/// Contiguous mutable buffer used while kernels build a tensor.
pub(crate) fn into_tensor<S: Scalar>(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
    debug_assert_eq!(numel(&shape), data.len());
    Tensor {
        shape,
        data: data.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
    }

    #[test]
    fn reshape_checks_count() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn bad_data_length_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
