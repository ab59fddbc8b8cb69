use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value encountered: {context}")]
    Numeric {
        context: String,
        iterate: Option<Vec<f64>>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("diverged after {iterations} iterations (objective increased 10 times in a row)")]
    Divergence {
        iterations: usize,
        iterate: Vec<f64>,
    },

    #[error("subsolver hit its iteration cap of {cap}")]
    Truncated { cap: usize },

    #[error("no ground truth available: {0}")]
    Unsupported(String),

    #[error("diagnostic: {0}")]
    Diagnostic(String),

    #[error("problem format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
