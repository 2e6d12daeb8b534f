//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles; calling
//! [`Tape::backward`] on a scalar output fills per-variable gradient slots.
//! The op set is exactly what the attention/jump forward pass and the BCE
//! loss need: matmul, gathers, segment reductions, masked softmax, layer
//! norm, and pointwise nonlinearities. Everything is 64-bit and eager, and
//! every op validates shapes and rejects non-finite outputs.

mod checkpoint;
mod tape;
mod tensor;


pub use checkpoint::{read_named_tensors, write_named_tensors, CheckpointError, CheckpointFile};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: segment {segment} is empty")]
    EmptySegment { op: &'static str, segment: usize },
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("attention group {group} sums to {sum}, expected 1")]
    GroupNotNormalized { group: usize, sum: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;
