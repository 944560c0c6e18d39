//! Dense float64 arrays and a small reverse-mode autodiff graph.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;

use thiserror::Error;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Graph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("expected a single element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}
