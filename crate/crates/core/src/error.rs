use alloc::string::String;

/// Errors raised by the solvers and simulators.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("state became non-finite or exceeded the blow-up bound at t={t}")]
    NonFiniteState { t: f64 },
    #[error("time {t} outside [0, {t_end}]")]
    OutOfRange { t: f64, t_end: f64 },
    #[error("{subject}: assumption violated: {condition}")]
    AssumptionViolated {
        condition: &'static str,
        subject: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Riccati solution escapes to infinity at t={t}")]
    FiniteEscape { t: f64 },
    #[error("fixed point not converged after {iterations} iterations (last error {last_error:e})")]
    NotConverged { iterations: usize, last_error: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Name of the violated assumption, if this is an assumption violation.
    pub fn violated_condition(&self) -> Option<&'static str> {
        match self {
            Error::AssumptionViolated { condition, .. } => Some(condition),
            _ => None,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
