use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure of a command, classified by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] adaseg_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use adaseg_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::InvalidDomain(_)
                | E::DomainMismatch { .. }
                | E::Precondition(_) => 2,
                E::Shape(_) | E::Data(_) | E::InvalidCheckpoint(_) => 3,
                E::NonFinite(_) | E::UndefinedMetric(_) => 4,
            },
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
