use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HorusError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("malformed encoding: {0}")]
    Encoding(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HorusError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HorusError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HorusError::Config(_) | HorusError::InvalidInput(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HorusError>;
