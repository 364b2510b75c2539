use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("invalid model or parameters: {0}")]
    Invalid(String),

    #[error("infeasible: {message} (residual {residual:.3e})")]
    Infeasible { message: String, residual: f64 },

    #[error("terminal synthesis failed: {0}")]
    Synthesis(String),

    #[error("terminal verification failed: {0}")]
    Verification(String),

    #[error("solver callback returned a non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error("scenario {path}: {message}")]
    Scenario { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
