//! Dense reverse-mode differentiation over row-major arrays.

mod gradcheck;
mod shape;
mod tape;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, ParamCheck, RELATIVE_ERROR_FLOOR};
pub use shape::Shape;
pub use tape::{
    Activation, BinaryOp, GraphError, GraphResult, Tape, UnaryOp, Var, LEAKY_RELU_SLOPE, NORM_EPSILON,
};

use serde::{Deserialize, Serialize};

/// Owned array with its shape; the unit parameters are stored and checked in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    pub shape: Shape,
    pub data: Vec<S>,
}

impl<S> Tensor<S> {
    /// Panics if `data` does not fill `shape`.
    pub fn new(shape: Shape, data: Vec<S>) -> Self {
        assert_eq!(shape.numel(), data.len(), "tensor data does not match shape {shape}");
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

impl<S: Clone + num_traits::Zero> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }
}
