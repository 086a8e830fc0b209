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

    #[error("input too short: {len} frames, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("input assembly: {0}")]
    Assembly(String),

    #[error("cannot encode character {0:?}")]
    Encoding(char),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding a checkpoint blob.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor {name}: shape {found:?} does not match config {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in checkpoint")]
    UnexpectedTensor(String),
    #[error("tensors are not in lexicographic order at {0}")]
    Order(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
