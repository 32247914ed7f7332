use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding dataset files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("{file}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        file: String,
        expected: u32,
        found: u32,
    },

    #[error("{file}: truncated, need {expected} bytes but found {found}")]
    Truncated {
        file: String,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{file}: length {len} is not a multiple of the {record}-byte record size")]
    RecordLength {
        file: String,
        len: usize,
        record: usize,
    },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("dataset is empty")]
    Empty,

    #[error("dataset files not found: {0}")]
    Missing(String),
}

/// Failures while reading a checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
}
