use thiserror::Error;

use crate::constraints::ConstraintError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown CSV header {header:?}; expected \"y,row,col,treatment\" or \"y,machine,treatment,measure\"")]
    Schema { header: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Constraint(#[from] ConstraintError),

    /// The Monte Carlo estimate carries no information (e.g. no draw hit the
    /// constrained region).
    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("EM did not converge after {iterations} iterations (last log-likelihood {last_loglik})")]
    NonConvergence { iterations: usize, last_loglik: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_) | Error::Numeric(_) | Error::NonConvergence { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}
