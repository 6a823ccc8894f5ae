use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{file}:{line}: malformed line, expected {expected} tab-separated fields, found {found}")]
    FieldCount {
        file: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{file}:{line}: unknown entity {id:?}")]
    UnknownEntity { file: String, line: usize, id: String },

    #[error("{file}:{line}: unknown relation {id:?}")]
    UnknownRelation { file: String, line: usize, id: String },

    #[error("{file}:{line}: duplicate id {id:?}")]
    DuplicateId { file: String, line: usize, id: String },

    #[error("{file}:{line}: duplicate fact in split")]
    DuplicateFact { file: String, line: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("loss targets are all padding")]
    AllPadTargets,

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("checkpoint version mismatch: found {0:?}")]
    CheckpointVersion(String),

    #[error("checkpoint vocabulary digest mismatch")]
    DigestMismatch,

    #[error("checkpoint truncated")]
    Truncated,

    #[error("checkpoint malformed: {0}")]
    CheckpointMalformed(String),

    #[error("entity trie is empty")]
    EmptyTrie,

    #[error("config {path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
