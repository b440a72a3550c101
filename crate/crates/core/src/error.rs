use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest has no entries")]
    NoEntries,

    #[error("duplicate video id {0:?}")]
    DuplicateId(String),

    #[error("{path}:{line}: unknown split {token:?} (expected train or test)")]
    UnknownSplit {
        path: PathBuf,
        line: usize,
        token: String,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: size mismatch, expected {expected} values but found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("frame {path}: {message}")]
    Frame { path: PathBuf, message: String },

    #[error("no frame files in {0}")]
    EmptyDirectory(PathBuf),

    #[error("ranking has no relevant items")]
    NoRelevant,

    #[error("video {0:?} has no test label")]
    MissingLabel(String),

    #[error("missing artifact {path}: run {command} first")]
    MissingArtifact { path: PathBuf, command: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
