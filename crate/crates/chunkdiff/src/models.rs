//! Saving and restoring trained models, and assembling them into a policy.

use std::collections::BTreeMap;
use std::path::Path;

use chunkdiff_core::ata::{AtaArch, AtaModel};
use chunkdiff_core::config::RunConfig;
use chunkdiff_core::datapipe::ActionStats;
use chunkdiff_core::lpg::{EpsNet, EpsNetArch, LatentRegressor, RegressorArch};
use chunkdiff_core::policy::{FrozenEncoders, Generator, Policy};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Receipt};
use crate::error::{Error, Result};
use crate::runfile::hex;
use crate::train::TrainLog;

pub const KIND_ATA: &str = "ata";
pub const KIND_LPG: &str = "lpg";
pub const KIND_REGRESSOR: &str = "regressor";
pub const KIND_TRAJECTORY: &str = "trajectory";

pub fn frozen_encoders(cfg: &RunConfig) -> FrozenEncoders {
    FrozenEncoders::new(cfg.image_size, cfg.d_model, cfg.proprio_dim, cfg.encoder_seed)
}

fn encoder_fingerprint(enc: &FrozenEncoders) -> String {
    let mut bytes = enc.image.checksum().to_vec();
    bytes.extend(enc.text.checksum());
    hex(&bytes)
}

/// A trained model with the statistics it was trained under.
#[derive(Debug, Clone)]
pub struct Stored<M> {
    pub model: M,
    pub stats: BTreeMap<String, ActionStats>,
    pub log: Option<TrainLog>,
    pub warnings: Vec<String>,
}

fn checkpoint_for(
    kind: &str,
    cfg: &RunConfig,
    params: &chunkdiff_core::autograd::ParamSet,
    arch: &impl serde::Serialize,
    stats: &BTreeMap<String, ActionStats>,
    log: Option<&TrainLog>,
) -> Checkpoint {
    let mut c = Checkpoint::new(kind, cfg, log.map_or(0, |l| l.steps), params, arch);
    c.set_aux_json("stats", stats);
    c.set_aux_json("encoders", &encoder_fingerprint(&frozen_encoders(cfg)));
    if let Some(l) = log {
        c.set_aux_json("train_log", l);
    }
    c
}

fn open(path: &Path, kind: &str, cfg: &RunConfig) -> Result<(Checkpoint, Vec<String>)> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let loaded = load_checkpoint(path, Some(cfg))?;
    loaded.checkpoint.expect_kind(kind)?;
    let stored: String = loaded.checkpoint.aux_json("encoders")?;
    if stored != encoder_fingerprint(&frozen_encoders(cfg)) {
        return Err(Error::Incompatible(format!(
            "{} was trained with different frozen encoders (check encoder_seed, image_size, d_model)",
            path.display()
        )));
    }
    Ok((loaded.checkpoint, loaded.warnings))
}

fn stored<M>(c: &Checkpoint, model: M, warnings: Vec<String>) -> Result<Stored<M>> {
    Ok(Stored { model, stats: c.aux_json("stats")?, log: c.aux_json("train_log").ok(), warnings })
}

pub fn save_ata(
    path: &Path,
    cfg: &RunConfig,
    m: &AtaModel,
    stats: &BTreeMap<String, ActionStats>,
    log: Option<&TrainLog>,
) -> Result<Receipt> {
    save_checkpoint(&checkpoint_for(KIND_ATA, cfg, &m.params, &m.arch, stats, log), path)
}

pub fn load_ata(path: &Path, cfg: &RunConfig) -> Result<Stored<AtaModel>> {
    let (c, w) = open(path, KIND_ATA, cfg)?;
    let arch: AtaArch = c.arch()?;
    stored(&c, AtaModel::from_parts(c.params.clone(), arch), w)
}

/// Saves a noise predictor; `kind` tells the latent generator from the trajectory baseline.
pub fn save_epsnet(
    path: &Path,
    kind: &str,
    cfg: &RunConfig,
    m: &EpsNet,
    stats: &BTreeMap<String, ActionStats>,
    log: Option<&TrainLog>,
) -> Result<Receipt> {
    save_checkpoint(&checkpoint_for(kind, cfg, &m.params, &m.arch, stats, log), path)
}

pub fn load_epsnet(path: &Path, kind: &str, cfg: &RunConfig) -> Result<Stored<EpsNet>> {
    let (c, w) = open(path, kind, cfg)?;
    let arch: EpsNetArch = c.arch()?;
    stored(&c, EpsNet { params: c.params.clone(), arch }, w)
}

pub fn save_regressor(
    path: &Path,
    cfg: &RunConfig,
    m: &LatentRegressor,
    stats: &BTreeMap<String, ActionStats>,
    log: Option<&TrainLog>,
) -> Result<Receipt> {
    save_checkpoint(&checkpoint_for(KIND_REGRESSOR, cfg, &m.params, &m.arch, stats, log), path)
}

pub fn load_regressor(path: &Path, cfg: &RunConfig) -> Result<Stored<LatentRegressor>> {
    let (c, w) = open(path, KIND_REGRESSOR, cfg)?;
    let arch: RegressorArch = c.arch()?;
    stored(&c, LatentRegressor { params: c.params.clone(), arch }, w)
}

/// Checks that an autoencoder and a generator agree on latent width and horizon.
pub fn check_compatible(ata: Option<&AtaModel>, generator: &Generator, horizon: usize, action_dim: usize) -> Result<()> {
    let latent_width = match generator {
        Generator::LatentDiffusion(n) => Some(n.shape().target_dim()),
        Generator::LatentRegression(r) => Some(r.arch.shape.width),
        Generator::Trajectory(n) => {
            let s = n.shape();
            if s.tokens != horizon || s.width != action_dim {
                return Err(Error::Incompatible(format!(
                    "trajectory model is {}x{}, run expects {horizon}x{action_dim}",
                    s.tokens, s.width
                )));
            }
            None
        }
    };
    if let Some(w) = latent_width {
        let ata = ata.ok_or_else(|| Error::MissingCheckpoint("latent generator needs an autoencoder".into()))?;
        let s = ata.shape();
        if s.d_z != w {
            return Err(Error::Incompatible(format!("autoencoder d_z {} but generator width {w}", s.d_z)));
        }
        if s.horizon != horizon || s.action_dim != action_dim {
            return Err(Error::Incompatible(format!(
                "autoencoder chunks are {}x{}, run expects {horizon}x{action_dim}",
                s.horizon, s.action_dim
            )));
        }
    }
    Ok(())
}

pub fn assemble_policy(
    cfg: &RunConfig,
    ata: Option<AtaModel>,
    generator: Generator,
    stats: BTreeMap<String, ActionStats>,
) -> Result<Policy> {
    check_compatible(ata.as_ref(), &generator, cfg.horizon, cfg.action_dim)?;
    Ok(Policy { ata, generator, encoders: frozen_encoders(cfg), stats, horizon: cfg.horizon, action_dim: cfg.action_dim })
}
