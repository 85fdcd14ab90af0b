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

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },

    #[error("truncated file {path}: expected more data at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate token {0:?}")]
    DuplicateToken(String),

    #[error("phrase {0:?} has no tokens")]
    EmptyPhrase(String),

    #[error("no token of {0:?} is in the vocabulary")]
    OutOfVocabulary(String),

    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("minibatch has no labelled cells")]
    DegenerateBatch,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("code entry {value} at subspace {subspace} exceeds ksub {ksub}")]
    InvalidCode {
        subspace: usize,
        value: u8,
        ksub: usize,
    },

    #[error("query has no ground-truth positives")]
    NoPositives,

    #[error("taxonomy contains a cycle through {0:?}")]
    CyclicTaxonomy(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
