use std::path::PathBuf;

use qfnlos::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}:{line}: {reason}", path.display())]
    Scene { path: PathBuf, line: usize, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] qfnlos::Error),
}

impl CliError {
    /// 1 usage/config, 2 data/format, 3 numerical precondition.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Scene { .. } | CliError::Io { .. } => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}
