//! CLI error taxonomy: contract violations exit with code 1, I/O
//! problems (always carrying the offending path) with code 2.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration, data, or a core-library contract violation.
    Contract(String),
    /// Filesystem or (de)serialization failure tied to a concrete path.
    Io { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Io { .. } => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Contract(m) => write!(f, "{m}"),
            CliError::Io { path, message } => write!(f, "i/o error ({path}): {message}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<attnfix_core::Error> for CliError {
    fn from(e: attnfix_core::Error) -> Self {
        CliError::Contract(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a path to errors from filesystem and serde operations.
pub trait PathCtx<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T> PathCtx<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

impl<T> PathCtx<T> for serde_json::Result<T> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
