use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library. Variants map onto the CLI exit codes in
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("corrupt container: {0}")]
    Corruption(String),

    #[error("state error: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Numerical(_) => "numerical",
            Error::Lookup(_) => "lookup",
            Error::Corruption(_) => "corruption",
            Error::State(_) => "state",
            Error::Validation(_) => "validation",
            Error::MissingInput(_) => "missing_input",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code: 2 for schema/config violations, 3 for missing
    /// inputs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingInput(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
