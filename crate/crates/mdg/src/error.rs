//! Crate-wide error type.
//!
//! Shape and domain contract violations inside the numeric kernels panic
//! with a descriptive message; this enum covers the recoverable failures
//! that surface through file formats, training, and the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdgError {
    /// Malformed or inconsistent input data (datasets, traces, configs).
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or other numeric breakdowns during a run.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Bad user-facing arguments or config keys.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MdgError>;

impl MdgError {
    pub fn data(msg: impl Into<String>) -> Self {
        MdgError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        MdgError::Numeric(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        MdgError::Usage(msg.into())
    }
}
