//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! The op set is closed over what the recommender needs: dense and constant
//! sparse products, element-wise arithmetic, reductions, row-wise softmax and
//! normalization, gathers/segment sums for ragged session batches, and
//! pairwise distances for distance correlation.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Grads, Graph, SparseMatrix, Var};
pub use params::{Bindings, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs a different element count than {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(&'static str),
    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss during gradient check")]
    NonFiniteLoss,
}
