use thiserror::Error;

use crate::tensor_io::DumpError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f32 },

    #[error("{name} = {value} is outside (0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("similarity matrix must have its diagonal zeroed before max-normalization")]
    DiagonalNotZeroed,

    #[error("similarity matrix is not max-normalized")]
    NotNormalized,

    #[error("config fingerprint mismatch: {left} vs {right}")]
    FingerprintMismatch { left: String, right: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("corpus contains no dump files: {0}")]
    EmptyCorpus(String),

    #[error("accumulator holds no samples")]
    EmptyAccumulator,

    #[error("{path}: {source}")]
    Dump {
        path: String,
        #[source]
        source: DumpError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
