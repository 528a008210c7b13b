//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar parameter or count fell outside its admissible range.
    #[error("value out of range for `{field}`: {detail}")]
    Range { field: &'static str, detail: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("token index {index} out of range for vocabulary of size {vocab_size}")]
    IndexOutOfRange { index: usize, vocab_size: usize },

    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },

    #[error("empty logit vector")]
    Empty,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("every candidate token was masked")]
    AllMasked,

    #[error("pivot `{0}` does not resolve against the reasoning chain")]
    UnresolvedPivot(String),

    #[error("pivot spans overlap or are out of order at offset {0}")]
    Overlap(usize),

    #[error("passage already contains pivot markers")]
    AlreadyWrapped,

    #[error("invalid span: {0}")]
    Span(String),

    #[error("no same-category counterfactual candidate for `{0}`")]
    NoCandidate(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("expected {expected} scores, got {actual}")]
    Arity { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn range(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Range {
            field,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the offending field for range errors.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            Error::Range { field, .. } => Some(field),
            _ => None,
        }
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, actual })
    }
}
