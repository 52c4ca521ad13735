use std::path::PathBuf;

use affordsplat_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("report error: {0}")]
    Report(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitClass {
    Other = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Core(CoreError::Format(msg.into()))
    }

    pub fn class(&self) -> ExitClass {
        match self {
            Error::Config(_) => ExitClass::Config,
            Error::Io { .. } | Error::Report(_) => ExitClass::Data,
            Error::Core(e) => match e {
                CoreError::Config(_) | CoreError::Argument(_) | CoreError::Compatibility(_) => ExitClass::Config,
                CoreError::NonFinite(_) | CoreError::UndefinedLoss(_) => ExitClass::Numeric,
                CoreError::Contract(_) => ExitClass::Other,
                _ => ExitClass::Data,
            },
        }
    }
}
