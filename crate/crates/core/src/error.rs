use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{malformed} of {total} lines malformed in {path} (lines {lines:?})")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
        lines: Vec<usize>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding cache is frozen; write for id {0} rejected")]
    CacheFrozen(u32),

    #[error("embedding cache is not frozen")]
    CacheNotFrozen,

    #[error("cannot freeze cache: {} ids missing, first {:?}", .0.len(), head(.0))]
    CacheIncomplete(Vec<u32>),

    #[error("invalid embedding for id {id}: {reason}")]
    InvalidEmbedding { id: u32, reason: String },

    #[error("unknown id {0}")]
    UnknownId(u32),

    #[error("empty candidate pool for anchor {0}")]
    EmptyPool(u32),

    #[error("replay fixture missing for prompt hash {0}")]
    ReplayMiss(String),

    #[error("remote request failed after {attempts} attempts: {message}")]
    Remote { attempts: usize, message: String },

    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

fn head(ids: &[u32]) -> &[u32] {
    &ids[..ids.len().min(16)]
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
