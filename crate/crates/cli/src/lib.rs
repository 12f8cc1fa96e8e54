//! Command-line workflow and HTTP inference service.

pub mod cli;
pub mod server;

use std::path::{Path, PathBuf};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] p2i_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if !e.is_data_error() => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
        }
    }

    /// One-line JSON description for stderr.
    pub fn report_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}
