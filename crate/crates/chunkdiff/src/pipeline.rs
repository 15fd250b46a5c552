//! The two training stages, the trajectory baseline, and policy loading.
//!
//! Checkpoint names inside a run directory:
//! `pretrain_ata`, `pretrain_lpg` / `pretrain_regressor` (pre-training),
//! `ata`, `lpg` / `regressor` (fine-tuning), `trajectory` (baseline).

use std::path::Path;

use chunkdiff_core::ata::AtaModel;
use chunkdiff_core::config::{LpgKind, RunConfig};
use chunkdiff_core::diffusion::Sampler;
use chunkdiff_core::envsuite::{Embodiment, TaskId};
use chunkdiff_core::lpg::EpsNet;
use chunkdiff_core::policy::{Generator, Policy};

use crate::datagen::{DOWNSTREAM_DIR, PRETRAIN_DIR};
use crate::dataset::{find_manifests, load_suite, DataSuite};
use crate::error::{Error, Result};
use crate::evaluate::EvalSettings;
use crate::models::{
    assemble_policy, frozen_encoders, load_ata, load_epsnet, load_regressor, save_ata, save_epsnet, save_regressor, KIND_LPG,
    KIND_TRAJECTORY,
};
use crate::rundir::RunDir;
use crate::train::{new_ata, new_lpg, new_regressor, train_ata, train_lpg, train_regressor, train_trajectory, TrainLog};

/// The robot every downstream task is evaluated on.
pub const DOWNSTREAM_EMBODIMENT: &str = "arm7";

/// Pre-training data: proprioception is dropped.
pub fn pretrain_suite(cfg: &RunConfig, data_root: &Path, run: &RunDir) -> Result<DataSuite> {
    suite_from(cfg, &data_root.join(PRETRAIN_DIR), false, run)
}

/// Downstream data: proprioception is kept and statistics are its own.
pub fn downstream_suite(cfg: &RunConfig, data_root: &Path, run: &RunDir) -> Result<DataSuite> {
    suite_from(cfg, &data_root.join(DOWNSTREAM_DIR), true, run)
}

fn suite_from(cfg: &RunConfig, dir: &Path, with_proprio: bool, run: &RunDir) -> Result<DataSuite> {
    let manifests = find_manifests(dir)?;
    if manifests.is_empty() {
        return Err(Error::Format(format!("no manifest.toml under {}", dir.display())));
    }
    let (suite, report) = load_suite(&manifests, cfg, &frozen_encoders(cfg), with_proprio)?;
    for (id, why) in &report.excluded {
        run.log(&format!("excluded dataset {id}: {why}"));
    }
    let eps: usize = suite.datasets.iter().map(|d| d.episodes.len()).sum();
    run.log(&format!("loaded {} datasets, {eps} episodes from {}", suite.datasets.len(), dir.display()));
    Ok(suite)
}

/// A trained autoencoder and latent generator.
#[derive(Debug, Clone)]
pub struct Trained {
    pub ata: AtaModel,
    pub generator: Generator,
    pub logs: Vec<TrainLog>,
}

fn generator_name(cfg: &RunConfig) -> &'static str {
    match cfg.lpg_kind {
        LpgKind::Diffusion => "lpg",
        LpgKind::Regression => "regressor",
    }
}

fn save_generator(run: &RunDir, name: &str, cfg: &RunConfig, g: &Generator, suite: &DataSuite, log: &TrainLog) -> Result<()> {
    let stats = suite.stats_by_embodiment();
    let path = run.checkpoint(name);
    let receipt = match g {
        Generator::LatentDiffusion(n) => save_epsnet(&path, KIND_LPG, cfg, n, &stats, Some(log))?,
        Generator::LatentRegression(r) => save_regressor(&path, cfg, r, &stats, Some(log))?,
        Generator::Trajectory(n) => save_epsnet(&path, KIND_TRAJECTORY, cfg, n, &stats, Some(log))?,
    };
    run.log(&format!("saved {} ({} bytes, sha256 {})", receipt.path.display(), receipt.bytes, &receipt.sha256[..16]));
    Ok(())
}

fn train_generator(
    cfg: &RunConfig,
    suite: &DataSuite,
    ata: &AtaModel,
    init: Option<Generator>,
    epochs: usize,
    phase: &str,
    run: &RunDir,
) -> Result<(Generator, TrainLog)> {
    Ok(match cfg.lpg_kind {
        LpgKind::Diffusion => {
            let init = match init {
                Some(Generator::LatentDiffusion(n)) => Some(n),
                _ => None,
            };
            let (n, l) = train_lpg(cfg, suite, ata, init, epochs, phase, &run.logger)?;
            (Generator::LatentDiffusion(n), l)
        }
        LpgKind::Regression => {
            let init = match init {
                Some(Generator::LatentRegression(r)) => Some(r),
                _ => None,
            };
            let (r, l) = train_regressor(cfg, suite, ata, init, epochs, phase, &run.logger)?;
            (Generator::LatentRegression(r), l)
        }
    })
}

/// Cross-embodiment pre-training of the autoencoder and the configured generator.
pub fn pretrain(cfg: &RunConfig, suite: &DataSuite, run: &RunDir) -> Result<Trained> {
    let epochs = cfg.scaled_epochs(cfg.pretrain_epochs);
    let (ata, la) = train_ata(cfg, suite, None, epochs, "pretrain/ata", &run.logger)?;
    let stats = suite.stats_by_embodiment();
    save_ata(&run.checkpoint("pretrain_ata"), cfg, &ata, &stats, Some(&la))?;
    let (generator, lg) = train_generator(cfg, suite, &ata, None, epochs, "pretrain/generator", run)?;
    save_generator(run, &format!("pretrain_{}", generator_name(cfg)), cfg, &generator, suite, &lg)?;
    run.write_json("pretrain_curves", &[&la, &lg])?;
    Ok(Trained { ata, generator, logs: vec![la, lg] })
}

/// Fresh downstream models with every same-named, same-shaped tensor copied from `pre`.
pub fn warm_start(
    cfg: &RunConfig,
    pre_ata: &AtaModel,
    pre_gen: &Generator,
    feature_dim: usize,
    run: &RunDir,
) -> Result<(AtaModel, Generator)> {
    let mut ata = new_ata(cfg, feature_dim);
    let n = ata.params.load_matching(&pre_ata.params);
    run.log(&format!("autoencoder: {n}/{} tensors initialized from pre-training", ata.params.len()));
    let generator = match (cfg.lpg_kind, pre_gen) {
        (LpgKind::Diffusion, Generator::LatentDiffusion(p)) => {
            let mut net = new_lpg(cfg, feature_dim)?;
            let n = net.params.load_matching(&p.params);
            run.log(&format!("generator: {n}/{} tensors initialized from pre-training", net.params.len()));
            Generator::LatentDiffusion(net)
        }
        (LpgKind::Regression, Generator::LatentRegression(p)) => {
            let mut reg = new_regressor(cfg, feature_dim);
            let n = reg.params.load_matching(&p.params);
            run.log(&format!("generator: {n}/{} tensors initialized from pre-training", reg.params.len()));
            Generator::LatentRegression(reg)
        }
        _ => return Err(Error::Incompatible("pre-trained generator kind differs from lpg_kind".into())),
    };
    Ok((ata, generator))
}

/// Reads the pre-training checkpoints in `dir` and warm-starts downstream models from them.
pub fn load_pretrained(cfg: &RunConfig, dir: &RunDir, feature_dim: usize, run: &RunDir) -> Result<(AtaModel, Generator)> {
    let stored = load_ata(&dir.checkpoint("pretrain_ata"), cfg)?;
    let mut warnings = stored.warnings;
    let generator = match cfg.lpg_kind {
        LpgKind::Diffusion => {
            let g = load_epsnet(&dir.checkpoint("pretrain_lpg"), KIND_LPG, cfg)?;
            warnings.extend(g.warnings);
            Generator::LatentDiffusion(g.model)
        }
        LpgKind::Regression => {
            let g = load_regressor(&dir.checkpoint("pretrain_regressor"), cfg)?;
            warnings.extend(g.warnings);
            Generator::LatentRegression(g.model)
        }
    };
    for w in &warnings {
        run.log(&format!("warning: {w}"));
    }
    warm_start(cfg, &stored.model, &generator, feature_dim, run)
}

/// Downstream training; starts from `init` when pre-training is enabled.
pub fn finetune(cfg: &RunConfig, suite: &DataSuite, init: Option<(AtaModel, Generator)>, run: &RunDir) -> Result<Trained> {
    let (ata_init, gen_init) = match (cfg.use_pretrain, init) {
        (true, Some((a, g))) => (Some(a), Some(g)),
        (true, None) => return Err(Error::MissingCheckpoint("use_pretrain is set but no pre-trained models were given".into())),
        (false, _) => (None, None),
    };
    let (ata, la) = train_ata(cfg, suite, ata_init, cfg.scaled_epochs(cfg.ata_epochs), "finetune/ata", &run.logger)?;
    let stats = suite.stats_by_embodiment();
    save_ata(&run.checkpoint("ata"), cfg, &ata, &stats, Some(&la))?;
    let (generator, lg) =
        train_generator(cfg, suite, &ata, gen_init, cfg.scaled_epochs(cfg.lpg_epochs), "finetune/generator", run)?;
    save_generator(run, generator_name(cfg), cfg, &generator, suite, &lg)?;
    run.write_json("finetune_curves", &[&la, &lg])?;
    Ok(Trained { ata, generator, logs: vec![la, lg] })
}

/// The trajectory-space diffusion baseline at matched width and depth.
pub fn train_baseline(cfg: &RunConfig, suite: &DataSuite, run: &RunDir) -> Result<(EpsNet, TrainLog)> {
    let (net, log) = train_trajectory(cfg, suite, cfg.scaled_epochs(cfg.lpg_epochs), "baseline/trajectory", &run.logger)?;
    save_generator(run, "trajectory", cfg, &Generator::Trajectory(net.clone()), suite, &log)?;
    run.write_json("baseline_curves", &[&log])?;
    Ok((net, log))
}

/// The fine-tuned policy stored in `run`.
pub fn load_policy(cfg: &RunConfig, run: &RunDir) -> Result<Policy> {
    let ata = load_ata(&run.checkpoint("ata"), cfg)?;
    for w in &ata.warnings {
        run.log(&format!("warning: {w}"));
    }
    let generator = match cfg.lpg_kind {
        LpgKind::Diffusion => Generator::LatentDiffusion(load_epsnet(&run.checkpoint("lpg"), KIND_LPG, cfg)?.model),
        LpgKind::Regression => Generator::LatentRegression(load_regressor(&run.checkpoint("regressor"), cfg)?.model),
    };
    assemble_policy(cfg, Some(ata.model), generator, ata.stats)
}

pub fn load_baseline_policy(cfg: &RunConfig, run: &RunDir) -> Result<Policy> {
    let path = run.checkpoint("trajectory");
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(format!(
            "trajectory baseline {} (train it with `lpg train --space trajectory`)",
            path.display()
        )));
    }
    let stored = load_epsnet(&path, KIND_TRAJECTORY, cfg)?;
    assemble_policy(cfg, None, Generator::Trajectory(stored.model), stored.stats)
}

pub fn policy_from(cfg: &RunConfig, trained: &Trained, suite: &DataSuite) -> Result<Policy> {
    assemble_policy(cfg, Some(trained.ata.clone()), trained.generator.clone(), suite.stats_by_embodiment())
}

pub fn config_sampler(cfg: &RunConfig) -> Sampler {
    Sampler::from_kind(cfg.sampler, cfg.sampler_steps)
}

/// Every task on the downstream robot, `n_trials` each, seeded by the run seed.
pub fn eval_settings(cfg: &RunConfig, sampler: Sampler) -> Result<EvalSettings> {
    Ok(EvalSettings {
        embodiment: Embodiment::preset(DOWNSTREAM_EMBODIMENT)?,
        tasks: TaskId::ALL.to_vec(),
        trials_per_task: cfg.n_trials,
        step_limit: cfg.step_limit,
        exec_steps: cfg.executed_steps(),
        sampler,
        seeds: vec![cfg.seed],
    })
}
