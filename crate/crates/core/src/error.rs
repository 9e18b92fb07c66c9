use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample {sample} has a non-finite coordinate ({value}) in dimension {dim}")]
    NonFinite { sample: usize, dim: usize, value: f64 },

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("indices must be distinct: {0:?}")]
    DuplicateIndex(Vec<usize>),

    #[error("empty set: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("enumeration needs {states} label assignments, above the limit of {limit}")]
    StateSpaceTooLarge { states: f64, limit: f64 },

    #[error("non-finite gradient entry at position {0}; step rejected")]
    NonFiniteGradient(usize),

    #[error("forward cache was produced by parameter generation {cached}, parameters are at {current}")]
    StaleForward { cached: u64, current: u64 },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated payload, expected {expected} bytes but found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
