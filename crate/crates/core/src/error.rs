use thiserror::Error;

use crate::gan::TrainTrace;
use crate::ot::DualPotentials;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    /// Sinkhorn ran out of iterations. Carries the best potentials seen.
    #[error("sinkhorn did not converge after {iterations} iterations (marginal error {marginal_error:e})")]
    NonConvergence {
        potentials: Box<DualPotentials>,
        marginal_error: f64,
        iterations: usize,
    },

    #[error("unsupported instance: {0}")]
    Unsupported(String),

    #[error("brute-force oracle restarts disagree by {spread:e}")]
    OracleFailure { spread: f64 },

    /// Training stopped early; the trace holds everything logged so far.
    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted {
        iteration: usize,
        reason: String,
        trace: Box<TrainTrace>,
    },
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::OracleFailure { .. }
                | Error::TrainingAborted { .. }
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
