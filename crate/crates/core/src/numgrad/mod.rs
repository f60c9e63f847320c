//! Dense float64 tensors with tape-based reverse-mode differentiation.

mod check;
pub mod fault;
mod params;
mod tape;
mod tensor;

pub use check::{central_difference, relative_error, GradCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{Csr, Gradients, Tape, Var, SELU_ALPHA, SELU_LAMBDA};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: index {index} out of bounds for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    Ragged,
    #[error("{0}: empty input")]
    Empty(&'static str),
}
