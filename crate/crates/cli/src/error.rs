use std::path::PathBuf;

use thiserror::Error;
use wcr_core::dataset::DatasetError;
use wcr_core::density::DensityError;
use wcr_core::iteration::LoopError;
use wcr_core::simdet::SimError;
use wcr_core::ScoringError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Dataset { path: PathBuf, source: DatasetError },
    #[error(transparent)]
    Domain(#[from] DatasetError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("no category has ground truth to evaluate")]
    NothingToEvaluate,
}

impl CliError {
    /// 1 for domain errors, 2 for usage and I/O errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Io { .. }
            | CliError::Config { .. }
            | CliError::Json { .. } => EXIT_USAGE,
            CliError::Dataset {
                source: DatasetError::Io(_) | DatasetError::Malformed { .. },
                ..
            } => EXIT_USAGE,
            _ => EXIT_DOMAIN,
        }
    }
}
