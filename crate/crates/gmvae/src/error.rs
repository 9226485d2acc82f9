use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] gmvae_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error("bad request: {0}")]
    Request(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> AppError + '_ {
        move |source| {
            if source.kind() == io::ErrorKind::NotFound {
                AppError::Missing(path.to_path_buf())
            } else {
                AppError::Io { path: path.to_path_buf(), source }
            }
        }
    }

    pub fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> AppError + '_ {
        move |source| AppError::Json { path: path.to_path_buf(), source }
    }

    /// 2 configuration, 3 training abort, 4 bad request, 5 missing
    /// artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use gmvae_core::Error as E;
        match self {
            AppError::Config(_) | AppError::Json { .. } | AppError::Core(E::Config(_)) => 2,
            AppError::Core(E::NonFinite(_)) => 3,
            AppError::Request(_) | AppError::Core(E::Request(_) | E::Mode { .. }) => 4,
            AppError::Missing(_) => 5,
            _ => 1,
        }
    }
}
