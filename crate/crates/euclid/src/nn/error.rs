//! Error type shared by the nn layer.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("gradient key `{0}` does not match any parameter")]
    GradientKey(String),

    #[error("loss node has shape {rows}x{cols}, expected a 1x1 scalar")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("checkpoint magic mismatch: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type NnResult<T> = Result<T, NnError>;
