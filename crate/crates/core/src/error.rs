use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AeroError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AeroError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl AeroError {
    pub fn shape(msg: impl Into<String>) -> Self {
        AeroError::Shape(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        AeroError::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AeroError::Io { path: path.into(), source }
    }

    /// True for errors that indicate a bug rather than bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, AeroError::Internal(_))
    }
}
