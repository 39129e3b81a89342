use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum AidError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl AidError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        AidError::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        AidError::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AidError::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        AidError::Numeric(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        AidError::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            AidError::Dimension(_) | AidError::Argument(_) | AidError::Config(_) => 2,
            AidError::Numeric(_) => 3,
            AidError::Format { .. } | AidError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, AidError>;
