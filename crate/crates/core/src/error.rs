use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {dims:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        dims: Vec<usize>,
    },

    #[error("{op}: index {index} out of bounds for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Parse failures for the binary dataset and checkpoint formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },

    #[error("unsupported format version {found} at byte {offset} (expected {expected})")]
    Version {
        offset: usize,
        expected: u32,
        found: u32,
    },

    #[error("truncated file: needed {needed} bytes at byte {offset}, only {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid header field {field} = {value} at byte {offset}")]
    InvalidHeader {
        field: &'static str,
        offset: usize,
        value: u64,
    },

    #[error("label {label} at byte {offset} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        offset: usize,
        label: u8,
        n_classes: u32,
    },

    #[error("tensor name at byte {offset} is not valid UTF-8")]
    BadName { offset: usize },

    #[error("{count} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, count: usize },

    #[error("tensor {name:?}: stored shape {stored:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),

    #[error("checkpoint contains unexpected tensor {0:?}")]
    UnknownTensor(String),
}
