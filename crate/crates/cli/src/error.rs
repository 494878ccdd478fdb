use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] occsplat::Error),

    #[error("invalid config at `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradcheck failed for {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(occsplat::Error::Config { .. }) | CliError::Parse { .. } => "config",
            CliError::Core(_) => "pipeline",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::GradcheckFailed(_) => "gradcheck",
        }
    }

    /// One-line machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> String {
        let field = match self {
            CliError::Parse { field, .. } | CliError::Core(occsplat::Error::Config { field, .. }) => Some(field.clone()),
            _ => None,
        };
        json!({
            "error": {
                "kind": self.kind(),
                "field": field,
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}
