use thiserror::Error;

use crate::optim::OptStatus;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while building designs, fitting models or running experiments.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("lengthscale must be strictly positive and finite, got {0}")]
    InvalidLengthscale(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("input is empty")]
    EmptyInput,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error(
        "matrix not positive definite after {retries} jitter retries (last jitter {jitter:e})"
    )]
    NotPositiveDefinite { retries: usize, jitter: f64 },

    #[error("stochastic kriging requires replication: site {site} has {mult} observation(s)")]
    SkRequiresReplication { site: usize, mult: usize },

    #[error("optimizer stopped with {status:?} at f = {f_best}")]
    Optimizer {
        status: OptStatus,
        x_best: Vec<f64>,
        f_best: f64,
    },

    #[error("unknown test function `{0}`")]
    UnknownFunction(String),

    #[error("input outside the domain of `{name}`")]
    OutOfDomain { name: &'static str },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("unsupported model document: {0}")]
    UnsupportedDocument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
