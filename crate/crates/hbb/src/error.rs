//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by kernel, model, inference and survey routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Input records violate a data contract (counts, weights, ids).
    #[error("data error: {0}")]
    Data(String),
    /// Parameter or model dimensions do not agree.
    #[error("structural error: {0}")]
    Structure(String),
    /// A numerical procedure failed (singular matrix, non-convergence).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The survey design cannot support the requested computation.
    #[error("design error: {0}")]
    Design(String),
    /// An iterative method stopped before meeting its tolerance.
    #[error("not converged: {msg}")]
    NotConverged {
        /// Description.
        msg: String,
        /// Best iterate reached (flat coordinates).
        best: Vec<f64>,
    },
    /// A random sampler exceeded its retry budget.
    #[error("sampling error: {0}")]
    Sampling(String),
}

/// Convenience alias.
pub type Result<T> = std::result::Result<T, Error>;
