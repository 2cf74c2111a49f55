use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("parameter vector must have at least one element")]
    EmptyVector,

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("degenerate zero-norm vector")]
    DegenerateVector,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IDX format error in {path}: {reason}")]
    IdxFormat { path: PathBuf, reason: String },

    #[error("IDX consistency error: {0}")]
    IdxConsistency(String),

    #[error("CSV format error at line {line}: {reason}")]
    CsvFormat { line: usize, reason: String },

    #[error("no updates to aggregate")]
    EmptyAggregation,

    #[error("config error at line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("history snapshot error at line {line}: {reason}")]
    Snapshot { line: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user configuration rather than a failure at run time.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::ConfigSyntax { .. } | Error::Config(_))
    }
}
