use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum NknError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NknError>;

pub(crate) fn invalid(msg: impl Into<String>) -> NknError {
    NknError::InvalidInput(msg.into())
}

pub(crate) fn spec_err(msg: impl Into<String>) -> NknError {
    NknError::Spec(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> NknError {
    NknError::Numeric(msg.into())
}
