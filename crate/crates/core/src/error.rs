//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation; names both shapes.
    #[error("{op}: shape mismatch: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// An argument violated a documented precondition.
    #[error("{0}")]
    InvalidArgument(String),

    /// Non-finite value (NaN or infinity) where finite data is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Optimizer step requested before any gradients were produced.
    #[error("sgd step before backward: parameter `{0}` has no gradient")]
    StepBeforeBackward(String),

    /// Checkpoint file malformed or inconsistent with the model config.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss); the last good checkpoint is preserved.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    TrainDiverged { epoch: usize, batch: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
