use std::path::PathBuf;

/// Process exit codes, one per failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Failure = 1,
    Config = 2,
    Io = 3,
    Data = 4,
    Exhausted = 5,
    Diverged = 6,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] ei_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn status(&self) -> ExitStatus {
        use ei_core::Error as E;
        match self {
            CliError::Config(_) => ExitStatus::Config,
            CliError::Io { .. } => ExitStatus::Io,
            CliError::Data(_) => ExitStatus::Data,
            CliError::Core(E::EmptyDataset) => ExitStatus::Data,
            CliError::Core(E::InvalidArgument(_) | E::CensusDimension(_)) => ExitStatus::Config,
            CliError::Core(_) => ExitStatus::Failure,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
