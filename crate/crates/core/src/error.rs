use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LiftError>;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid cache file {path}: {reason}")]
    CorruptCache { path: PathBuf, reason: String },

    #[error("duplicate caption id {0}")]
    DuplicateId(u64),

    #[error("dimension mismatch for id {id}: expected {expected}, got {actual}")]
    DimensionMismatch {
        id: u64,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite component in vector for id {0}")]
    NonFiniteVector(u64),

    #[error("caption id {0} not found in cache")]
    NotFound(u64),

    #[error("caption ids not found in cache: {0:?}")]
    NotFoundMany(Vec<u64>),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("failed to ingest image {locator}: {reason}")]
    Ingest { locator: String, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed input at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl LiftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LiftError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &str, expected: impl ToString, actual: impl ToString) -> Self {
        LiftError::Shape {
            what: what.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
