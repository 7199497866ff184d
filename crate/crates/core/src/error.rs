use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants are coarse on purpose: the command-line front end maps each
/// one onto a distinct process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),

    /// A file did not decode (bad magic, truncated body, bad checksum, ...).
    #[error("format: {0}")]
    Format(String),

    /// Arguments violate an operation's preconditions.
    #[error("invalid: {0}")]
    Invalid(String),

    /// Operand shapes do not fit together.
    #[error("shape: {0}")]
    Shape(String),

    /// A computation produced a non-finite value.
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
