use thiserror::Error;

/// Errors produced by the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (shapes, weights, ranges).
    #[error("invalid input: {0}")]
    Input(String),

    /// Iterative method hit its iteration cap before reaching the tolerance.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// Non-finite or vanishing quantities encountered during iteration.
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    /// Operation not defined for the given system or size.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Constrained instance with a partition cell that carries no mass.
    #[error("degenerate instance: {0}")]
    Degenerate(String),

    /// Problem assembly detected an identity violation (usually unconverged kernels).
    #[error("assembly failed: {0}")]
    Assembly(String),

    /// A functional was evaluated where it is undefined.
    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
