use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 0 success, 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        })
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<embsig_core::Error> for CliError {
    fn from(e: embsig_core::Error) -> Self {
        use embsig_core::Error as E;
        match e {
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
