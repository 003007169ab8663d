//! Error type carrying the process exit code contract:
//! 0 success, 2 usage/validation, 3 numeric failure.

use std::path::Path;

use cdgan_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, unreadable/invalid files, failed validation.
    #[error("{0}")]
    Usage(String),
    /// A computation produced non-finite values.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError::Numeric(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

/// Attach the offending path to an IO error; missing files are a usage
/// problem (exit 2), not a crash.
pub fn io_ctx(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, CliError>;
