use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("{what} did not converge after {iterations} iterations (relative residual {residual:.3e}); {hint}")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
        /// Best iterate reached before giving up.
        best: Box<Vec<f64>>,
        hint: String,
    },

    #[error("conjugate gradient breakdown: {0}; retry with the dense fallback")]
    Breakdown(String),

    #[error("{study} refused: missing hypotheses {}", .missing.join(", "))]
    HypothesisMissing {
        study: &'static str,
        missing: Vec<String>,
    },

    #[error("hypothesis check failed: {0}")]
    HypothesisViolated(String),

    #[error("solutions live on different Galerkin spaces")]
    SpaceMismatch,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
