use std::path::PathBuf;

use chunkdiff_core::ata::AtaError;
use chunkdiff_core::config::ConfigDomainError;
use chunkdiff_core::datapipe::DataError;
use chunkdiff_core::diffusion::DiffusionError;
use chunkdiff_core::encoders::EncoderError;
use chunkdiff_core::envsuite::EnvError;
use chunkdiff_core::lpg::LpgError;
use chunkdiff_core::policy::PolicyError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    ConfigParse { path: PathBuf, message: String },
    #[error(transparent)]
    ConfigDomain(#[from] ConfigDomainError),
    #[error("{}: corrupt file: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("{0}")]
    Format(String),
    #[error("{phase} diverged at step {step}: loss {loss}")]
    Diverged { phase: String, step: u64, loss: f64 },
    #[error("action autoencoder weights changed while it was meant to be frozen")]
    FrozenViolation,
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ata(#[from] AtaError),
    #[error(transparent)]
    Lpg(#[from] LpgError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
