use std::path::Path;

use serde::Serialize;

pub type AppResult<T> = Result<T, AppError>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Input { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] faststi_core::Error),
}

impl AppError {
    pub fn input(path: &Path, source: std::io::Error) -> Self {
        AppError::Input { path: path.display().to_string(), source }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        AppError::Output { path: path.display().to_string(), source }
    }

    /// 2 for usage and configuration problems (including unreadable
    /// inputs), 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) | AppError::Input { .. } => 2,
            AppError::Core(faststi_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "usage",
            AppError::Config(_) => "config",
            AppError::Input { .. } => "input",
            AppError::Output { .. } => "output",
            AppError::Format(_) => "format",
            AppError::Core(_) => "runtime",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() }
    }
}

/// Machine-readable failure written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}
