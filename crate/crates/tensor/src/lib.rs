//! Minimal dense-tensor and reverse-mode differentiation substrate.
//!
//! Values are stored as `f32`; reductions (sums, norms, normalization
//! statistics, losses) accumulate in `f64`. Broadcasting is limited to leading
//! batch axes: [`Graph::add_trailing`], [`Graph::mul_trailing`] and
//! [`Graph::broadcast_mid`] are the only shape-expanding primitives.

mod graph;
mod kernels;
pub mod nn;
pub mod optim;
mod param;
mod tensor;

pub use graph::{Gradients, Graph, Padding, Var};
pub use optim::{adam_step, AdamConfig, AdamState, CosineSchedule, StepReport};
pub use param::{ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::{inverse_axes, permute, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn shape(op: &'static str, detail: String) -> Self {
        TensorError::ShapeMismatch { op, detail }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
