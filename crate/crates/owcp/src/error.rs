//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A malformed line in a line-delimited input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Duplicate flow id inside one corpus.
    #[error("duplicate flow_id {id:?} on lines {first_line} and {second_line}")]
    DuplicateFlowId {
        id: String,
        first_line: usize,
        second_line: usize,
    },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation received an empty or otherwise unusable input set.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor/embedding shape mismatch.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Malformed or incompatible checkpoint container.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A pipeline stage was requested before its prerequisites exist.
    #[error("requires stage: {0}")]
    MissingStage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
