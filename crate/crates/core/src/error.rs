use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QsmError>;

#[derive(Debug, Error)]
pub enum QsmError {
    #[error("invalid volume metadata: {0}")]
    InvalidMeta(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("size mismatch in {path}: expected {expected} bytes of payload, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite payload in {path} at element {index}")]
    NonFinitePayload { path: PathBuf, index: usize },

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QsmError {
    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, QsmError::NonFinite(_) | QsmError::Diverged(_))
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        QsmError::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}
