use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid grid resolution: {0}")]
    InvalidResolution(String),

    #[error("mask interior cells are not 4-connected")]
    DisconnectedMask,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid function has nonzero value {value} at boundary node {node}")]
    BoundaryViolation { node: usize, value: f64 },

    #[error("grid function has non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("degenerate input: the function vanishes identically")]
    Degenerate,

    #[error(
        "inner solver did not converge after {iterations} iterations \
         (residual {residual:e}, tolerance {tolerance:e})"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("iterate {step} has vanishing L^p norm")]
    DegenerateIterate { step: usize },

    #[error("request with {size} unknowns exceeds the limit of {limit}")]
    SizeExceeded { size: usize, limit: usize },

    #[error("shooting failed: {0}")]
    Shooting(String),

    #[error("oracle cross-check failed: {0}")]
    OracleMismatch(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
