use std::path::PathBuf;

/// Crate-wide error type.
///
/// `Validation` covers every contract violation that can be detected from
/// arguments alone (shape mismatches, bad ratios, non-divisible patch sizes);
/// `Config` covers structurally valid but semantically impossible
/// configurations. IO errors keep the offending path.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for `Error::Validation` with format arguments.
#[macro_export]
macro_rules! bail_validation {
    ($($arg:tt)*) => {
        return Err($crate::Error::Validation(format!($($arg)*)))
    };
}

/// Shorthand for `Error::Config` with format arguments.
#[macro_export]
macro_rules! bail_config {
    ($($arg:tt)*) => {
        return Err($crate::Error::Config(format!($($arg)*)))
    };
}
