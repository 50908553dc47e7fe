use thiserror::Error;

/// Errors raised by the library. The CLI maps [`Error::Usage`] and
/// [`Error::Io`] to exit code 2 and the numeric variants to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("degenerate preference: {0}")]
    Degenerate(String),
    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: usize, reason: String, last_good: Option<Box<crate::trainer::TrainRecord>> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::NoConvergence { .. } | Error::Degenerate(_) | Error::TrainAborted { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
