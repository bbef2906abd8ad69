//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CilError {
    /// Invalid configuration (bad protocol split, non-positive shape, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented invariant was violated at runtime.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Numerical failure: overflow, NaN, non-convergence, degenerate input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation precondition was not met by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// API misuse (wrong call order, empty input where data is required).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CilError>;
