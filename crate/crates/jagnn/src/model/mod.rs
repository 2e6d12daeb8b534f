//! Jump-attentive graph neural network.
//!
//! Each layer runs per-relation multi-head attention over a node's sampled
//! `k_top` anchors (plus a self edge), averages heads, sums relations, and
//! applies ReLU. A layer-norm stage with learned affine parameters precedes
//! every layer. The jump path averages the stored activations of each
//! target's `n_random` anchors per relation over the last `d + 1` layers and
//! aggregates them into a vector that is concatenated with the final
//! attention embedding before the sigmoid head.

mod forward;
mod params;
mod plan;


pub use forward::{
    attention_coefficients, bce_with_depth_penalty, forward, AttentionRecord, ForwardOptions,
    ForwardOutput, LossBreakdown, ParamVars,
};
pub use params::{Architecture, JumpAggregation, ModelParams};
pub use plan::{BatchPlan, JumpPlan, RelationPlan};

use thiserror::Error;

use crate::numeric::NumericError;
use crate::sampler::SamplerError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, got {got:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("graph feature dimension {got} does not match architecture {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("label vector length {got} does not match {expected} targets")]
    LabelLength { expected: usize, got: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}
