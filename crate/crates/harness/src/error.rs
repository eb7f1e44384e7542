use std::path::PathBuf;

use distransfer_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing checkpoint or dataset: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("threshold check failed: {0}")]
    Check(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(CoreError),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) | HarnessError::MissingPath(_) => EXIT_CONFIG,
            HarnessError::Numerical(_) => EXIT_NUMERICAL,
            HarnessError::Check(_) => EXIT_CHECK,
            HarnessError::Io { .. } => EXIT_CONFIG,
            HarnessError::Core(e) => match e {
                CoreError::TrainingFailure { .. } | CoreError::NumericalFailure { .. } => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            },
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        HarnessError::Core(e)
    }
}

pub fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
