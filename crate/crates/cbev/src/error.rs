use std::path::{Path, PathBuf};

/// Failures of the file formats and commands.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] cbev_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("self-test failed: {0} check(s) did not pass")]
    SelftestFailed(usize),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 3 for self-test failures, 2 for everything else.
    /// Usage errors (exit 1) are raised by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::SelftestFailed(_) => 3,
            _ => 2,
        }
    }
}
