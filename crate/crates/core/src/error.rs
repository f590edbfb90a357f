use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },

    #[error("shape {0:?} has a zero-sized dimension")]
    EmptyDimension(Vec<usize>),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{0}: unsupported tensor rank {1}")]
    UnsupportedRank(&'static str, usize),

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{0}: length mismatch ({1} vs {2})")]
    CountMismatch(&'static str, usize, usize),

    #[error("sample {0} has no timestep but the granularity is timestep-aware")]
    MissingTimestep(usize),

    #[error("time bin {0} received no calibration samples")]
    EmptyTimeBin(usize),

    #[error("bias correction has {expected} heads, tensor has {found}")]
    HeadMismatch { expected: usize, found: usize },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
