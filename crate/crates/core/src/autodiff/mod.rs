//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a dynamic tape rebuilt for every forward pass: each
//! primitive allocates its output buffer in an arena and records the op, and
//! [`Graph::backward`] replays the records in reverse to accumulate adjoints.
//! All arithmetic is 64-bit. Every op output is checked for non-finite values
//! before the forward pass is allowed to continue.

mod check;
mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{finite_difference_check, CheckError};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use graph::{CustomOp, GradMap, Graph, GraphMode, NodeId};
pub use optim::{gd_rollback, gd_step, Adam, AdamConfig};
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by graph construction and the backward pass.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss node has shape {shape:?}, expected a scalar")]
    LossNotScalar { shape: Vec<usize> },
    #[error("backward: tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {id:?} already registered")]
    DuplicateParam { id: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AdError>;
