//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by schema construction, corpus IO, model configuration
/// and the training/evaluation pipeline.
#[derive(Error, Debug)]
pub enum DsgfError {
    #[error("schema validation: {0}")]
    SchemaValidation(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown node id: {0}")]
    UnknownNode(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("evaluation alignment: {0}")]
    EvalAlignment(String),
    #[error("encoder cache miss: {0}")]
    CacheMiss(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DsgfError>;
