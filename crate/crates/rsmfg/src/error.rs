use std::path::PathBuf;

use rsmfg_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn message(&self) -> Option<&str> {
        match self {
            CliError::Parse { message, .. } => Some(message),
            _ => None,
        }
    }

    /// 1 IO, 2 parse or validation, 3 not converged, 4 finite escape,
    /// 5 non-finite simulation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Parse { .. } => 2,
            CliError::Core(e) => match e {
                CoreError::NotConverged { .. } => 3,
                CoreError::FiniteEscape { .. } => 4,
                CoreError::NonFiniteState { .. } => 5,
                CoreError::AssumptionViolated { .. }
                | CoreError::DimensionMismatch(_)
                | CoreError::InvalidArgument(_)
                | CoreError::OutOfRange { .. } => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
