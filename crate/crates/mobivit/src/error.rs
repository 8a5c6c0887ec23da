use std::path::PathBuf;

use mobivit_core::Error as CoreError;

/// Process exit codes. The numeric values are a stable contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    CheckFailed = 1,
    Config = 2,
    Io = 3,
    Numerical = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: CoreError,
    },
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, source: CoreError) -> Self {
        CliError::Data {
            path: path.into(),
            source,
        }
    }

    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Config(_) => ExitStatus::Config,
            CliError::Io { .. } | CliError::Data { .. } => ExitStatus::Io,
            CliError::Numerical(_) => ExitStatus::Numerical,
            CliError::CheckFailed(_) => ExitStatus::CheckFailed,
            CliError::Core(e) => match e {
                CoreError::Numerical(_) => ExitStatus::Numerical,
                CoreError::Format { .. } => ExitStatus::Io,
                CoreError::Config(_) | CoreError::Dimension { .. } | CoreError::Index { .. } => ExitStatus::Config,
            },
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
