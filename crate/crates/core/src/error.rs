//! Error type shared across the library.

use thiserror::Error;

/// Library-wide error enum.
///
/// `Domain` covers invalid arguments and out-of-range queries, `Parse` covers
/// malformed JSON input, `Convergence` covers iteration failures and carries
/// the residual history for diagnosis.
#[derive(Debug, Error)]
pub enum PsrError {
    /// Arguments outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed textual input (JSON process spec, CLI values).
    #[error("parse error: {0}")]
    Parse(String),

    /// An iterative procedure failed to reach its tolerance.
    #[error("convergence failure after {iterations} iterations, residual {residual:.3e}")]
    Convergence {
        iterations: usize,
        residual: f64,
        /// Sup-norm update sizes per iteration, oldest first.
        history: Vec<f64>,
    },
}

pub type Result<T> = std::result::Result<T, PsrError>;

impl PsrError {
    pub fn domain(msg: impl Into<String>) -> Self {
        PsrError::Domain(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        PsrError::Parse(msg.into())
    }
}
