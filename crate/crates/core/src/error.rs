//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite loss: {context}")]
    NonFiniteLoss { context: String },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset line {line}: {reason}")]
    DatasetLine { line: usize, reason: String },

    #[error("dataset schema version mismatch: found {found:?}, expected {expected:?}")]
    DatasetVersion { found: String, expected: String },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
