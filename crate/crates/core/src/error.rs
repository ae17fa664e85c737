use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: item {id}: {reason}")]
    Schema { line: usize, id: String, reason: String },

    #[error("duplicate item id {0}")]
    DuplicateId(String),

    #[error("{0}")]
    Parse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown unit id {0}")]
    UnknownUnit(u64),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("retrieval produced no context")]
    EmptyContext,

    #[error("embedder failed for query {query}: {reason}")]
    Embedder { query: String, reason: String },

    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
