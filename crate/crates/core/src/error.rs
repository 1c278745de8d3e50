use std::path::PathBuf;

use dualvae_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("{0}")]
    Contract(String),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } | Error::InvalidConfig(_) => "config",
            Error::Autodiff(_) => "numeric",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) | Error::CheckpointVersion { .. } => "checkpoint",
            Error::Dataset(_) | Error::Image { .. } => "dataset",
            Error::TokenOutOfRange { .. } | Error::Contract(_) => "contract",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
