//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate question id `{id}`")]
    DuplicateId { id: String },

    #[error("invalid question `{id}`: {reason}")]
    InvalidQuestion { id: String, reason: String },

    #[error("question `{id}` carries no label")]
    MissingLabel { id: String },

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("embedding dimension {dim} below minimum {min}")]
    DimensionTooSmall { dim: usize, min: usize },

    #[error("non-finite embedding component in `{id}`")]
    NonFiniteEmbedding { id: String },

    #[error("dataset has {len} entries, need at least {need}")]
    DatasetTooSmall { len: usize, need: usize },

    #[error("{what} requires non-empty {resource} when alpha > 0")]
    MissingResource {
        what: &'static str,
        resource: &'static str,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown token `{token}`")]
    UnknownToken { token: String },

    #[error("all {group_size} extracted answers are unparseable")]
    AllVotesNone { group_size: usize },

    #[error("digest mismatch for dataset `{name}`: expected {expected}, got {actual}")]
    DigestMismatch {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("external generator failed after {attempts} attempts: {reason}")]
    GeneratorFailed { attempts: usize, reason: String },

    #[error("generator response malformed: {0}")]
    GeneratorResponse(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
