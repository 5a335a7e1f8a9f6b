use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bigg_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    CheckFailed(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 1 for bad input or failed checks, 2 for internal faults.
    pub fn exit_code(&self) -> ExitCode {
        use bigg_core::Error as E;
        let code = match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::CheckFailed(_) => 1,
            CliError::Internal(_) => 2,
            CliError::Core(e) => match e {
                E::Validation { .. }
                | E::InvalidInput(_)
                | E::UnknownModelKind { .. }
                | E::Checkpoint(_)
                | E::Json(_)
                | E::Io(_) => 1,
                _ => 2,
            },
        };
        ExitCode::from(code)
    }
}
