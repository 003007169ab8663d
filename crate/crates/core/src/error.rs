//! Error type shared by the core modules.

use alloc::string::String;

/// Errors produced by core computations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// An input failed a precondition (empty grid, mismatched lengths, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A requested range lies outside the data extent.
    #[error("range error: {0}")]
    Range(String),
    /// A configuration value is inconsistent or unsupported.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric quantity became non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
}
