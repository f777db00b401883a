use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Argument { field: String, message: String },
    #[error(transparent)]
    Core(#[from] tcan_core::Error),
}

impl CliError {
    pub fn argument(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Argument {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Core(tcan_core::Error::Io {
            path: path.into(),
            source,
        })
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Argument { .. } => EXIT_CONFIG,
            Self::Core(tcan_core::Error::Config(_)) => EXIT_CONFIG,
            Self::Core(tcan_core::Error::NumericAbort { .. }) => EXIT_NUMERIC,
            Self::Core(_) => EXIT_FAILURE,
        }
    }
}

impl From<tcan_core::error::ConfigError> for CliError {
    fn from(e: tcan_core::error::ConfigError) -> Self {
        Self::Core(e.into())
    }
}

impl From<tcan_core::error::DataError> for CliError {
    fn from(e: tcan_core::error::DataError) -> Self {
        Self::Core(e.into())
    }
}

impl From<tcan_core::error::TensorError> for CliError {
    fn from(e: tcan_core::error::TensorError) -> Self {
        Self::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
