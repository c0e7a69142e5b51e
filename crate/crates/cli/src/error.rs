use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the subcommands, each tied to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Input(#[from] bibq_core::Error),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{} of {} layers failed:\n{}", .failures.len(), .total, .failures.join("\n"))]
    Partial { failures: Vec<String>, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Partial { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
