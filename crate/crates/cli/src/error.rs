use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),

    /// Malformed input file, located by line and column.
    #[error("{path}: line {line}, column `{column}`: {message}")]
    Input {
        path: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] twinbeam_core::Error),
}

impl CliError {
    /// 2 for solver failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_solver_failure() => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
