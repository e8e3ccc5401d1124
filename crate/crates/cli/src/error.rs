use std::path::PathBuf;

use llab_core::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] llab_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for bad input, 3 for numerical trouble, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Checkpoint { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config | ErrorKind::Range | ErrorKind::Plan => 2,
                ErrorKind::Numeric | ErrorKind::State => 3,
            },
        }
    }

    pub fn class(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "numeric",
            _ => "io",
        }
    }

    /// Single-line JSON diagnostic for the error stream.
    pub fn diagnostic(&self) -> String {
        serde_json::json!({
            "error": self.class(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
