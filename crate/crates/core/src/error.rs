use thiserror::Error;

use crate::batchnorm::StatsMode;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward without a matching forward pass: {0}")]
    NoForward(String),

    #[error("statistics mode mismatch: forward ran in {forward}, backward requested {backward}")]
    ModeMismatch {
        forward: StatsMode,
        backward: StatsMode,
    },

    #[error("batch of size {0} has no batch variance (updated-stats needs at least 2 samples)")]
    DegenerateBatch(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("malformed IDX file at byte offset {offset}: {message}")]
    Idx { offset: u64, message: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
