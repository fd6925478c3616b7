use std::path::PathBuf;

use thiserror::Error;

use donut_core::checkpoint::CheckpointError;
use donut_core::config::ConfigError;
use donut_core::decoder::DecoderError;
use donut_core::metrics::MetricError;
use donut_core::train::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// 1 usage, 2 validation (including unreadable inputs), 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Numeric(_) => 3,
            Self::Decoder(DecoderError::NonFinite(_)) => 3,
            Self::Train(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}
