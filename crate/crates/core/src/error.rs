use std::io;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index {index} out of range for {len} tokens")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A CTKV file or tier config that does not parse.
    #[error("malformed input: {0}")]
    Format(String),

    #[error("chunk `{0}` already exists")]
    AlreadyExists(String),

    #[error("chunk `{0}` not found")]
    NotFound(String),

    #[error("objective returned a non-finite value {value} at r = {ratio}")]
    Objective { ratio: f64, value: f64 },

    #[error("profiling failed: {0}")]
    Profile(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::InvalidParam(msg.into())
}
