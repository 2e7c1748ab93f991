//! Dense reverse-mode differentiation over rank-1/rank-2 `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves marked
//! `requires_grad` receive gradients from [`Graph::backward`], and [`Adam`]
//! turns those into parameter updates.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, AdamState};
pub use gradcheck::{central_difference, grad_check};
pub use graph::{Gradients, Graph, OpKind, Var, LEAKY_RELU_SLOPE};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid tensor shape {shape:?} (rank 1 or 2, positive dims)")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a one-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}
