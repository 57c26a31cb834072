//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unbounded: {0}")]
    Unbounded(String),

    /// The numerical solver stopped without a certified answer. Carries the
    /// worst residual it reached.
    #[error("solver failure ({detail}), worst residual {residual:.3e}")]
    SolverFailure { detail: String, residual: f64 },

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
