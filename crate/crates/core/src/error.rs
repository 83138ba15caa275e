use std::io;

use thiserror::Error;

/// Errors raised by the library. Each variant maps onto one failure class
/// the command-line front end turns into an exit code.
#[derive(Debug, Error)]
pub enum CrwnError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("no context stored for task {0}")]
    MissingTask(u32),

    #[error("incompatible model: expected fingerprint {expected:016x}, found {found:016x}")]
    Incompatible { expected: u64, found: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = CrwnError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> CrwnError {
    CrwnError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> CrwnError {
    CrwnError::Shape(msg.into())
}

pub(crate) fn usage_err(msg: impl Into<String>) -> CrwnError {
    CrwnError::Usage(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> CrwnError {
    CrwnError::Format(msg.into())
}
