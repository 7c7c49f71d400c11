use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("fortran-ordered arrays are not supported")]
    UnsupportedLayout,

    #[error("non-finite value at flat index {0}")]
    NonFiniteData(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("inverse residual {residual:e} exceeds tolerance {tolerance:e}")]
    InverseResidual { residual: f64, tolerance: f64 },

    #[error("invalid hessian: {0}")]
    InvalidHessian(String),

    #[error("need at least {k} vectors to train {k} centroids, got {available}")]
    InsufficientData { k: usize, available: usize },

    #[error("centroid count {0} is not a power of two")]
    InvalidK(usize),

    #[error("invalid training options: {0}")]
    InvalidOptions(String),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("index {index} out of range for codebook of size {k}")]
    CorruptIndices { index: usize, k: usize },

    #[error("index at position {0} does not fit the bitwidth")]
    IndexOverflow(usize),

    #[error("corrupt index stream: {0}")]
    CorruptStream(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
