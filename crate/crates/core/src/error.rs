//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix not positive definite after {attempts} attempts (last jitter {last_jitter:.3e})")]
    NotPositiveDefinite { attempts: usize, last_jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integrand returned a non-finite value at quadrature node {node}")]
    Evaluation { node: usize },

    #[error("gradient step aborted: {0}")]
    AbortStep(String),

    #[error("objective became non-finite: {0}")]
    NonFiniteObjective(String),

    #[error("dataset too small: {0}")]
    DataTooSmall(String),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("no usable rows remain: {0}")]
    EmptyAfterFiltering(String),

    #[error("malformed CSV at line {line}: {msg}")]
    MalformedCsv { line: u64, msg: String },

    #[error("column '{0}' is constant and cannot be standardized")]
    ConstantColumn(String),

    #[error("timestamps must be strictly increasing (violated at row {0})")]
    NonMonotonicTimestamps(usize),

    #[error("no complete windows remain after lag-feature construction")]
    EmptyAfterWindowing,

    #[error("feature mismatch: missing {missing:?}, extra {extra:?}")]
    FeatureMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("instance size {n} exceeds the exact-GP cap {cap}")]
    SizeCapExceeded { n: usize, cap: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
