//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model loading, compilation, filtering and sampling.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model specification, configuration or data (CLI exit code 2).
    #[error("validation: {0}")]
    Validation(String),
    /// Numerical failure: singular factor, non-finite value, failed factorization
    /// (CLI exit code 3).
    #[error("numeric: {0}")]
    Numeric(String),
    /// File or serialization failure (CLI exit code 4).
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
