//! Horizon sweep: per-`h` training, evaluation, latent export and silhouette scores.

use std::path::Path;

use chunkdiff_core::ata::AtaModel;
use chunkdiff_core::config::RunConfig;
use chunkdiff_core::datapipe::SampleRef;
use chunkdiff_core::metrics::silhouette_permutation_test;
use chunkdiff_core::rng::seeded_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataSuite, Split};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_policy, EvalReport};
use crate::export::{export_latents, latent_means, skill_label};
use crate::pipeline::{config_sampler, downstream_suite, eval_settings, finetune, policy_from};
use crate::rundir::RunDir;
use crate::runfile::config_hash;
use crate::train::train_ata;

pub const DEFAULT_HORIZONS: [usize; 5] = [4, 8, 16, 24, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteResult {
    pub points: usize,
    pub permutations: usize,
    pub observed: f64,
    pub null_mean: f64,
    pub null_max: f64,
    pub p_value: f64,
}

/// Silhouette of posterior means grouped by skill label, against label permutations.
///
/// Uses `max_points` chunks drawn without replacement from the whole suite.
pub fn latent_silhouette(
    ata: &AtaModel,
    suite: &DataSuite,
    max_points: usize,
    permutations: usize,
    seed: u64,
) -> Result<SilhouetteResult> {
    let mut refs: Vec<SampleRef> = suite.refs(Split::All).into_iter().flatten().collect();
    let mut rng = seeded_rng(seed, "sweep/silhouette");
    refs.shuffle(&mut rng);
    refs.truncate(max_points);
    let points = latent_means(ata, suite, &refs)?;
    let labels: Vec<usize> = refs.iter().map(|r| skill_label(suite, *r) as usize).collect();
    let t = silhouette_permutation_test(&points, &labels, permutations, &mut rng);
    Ok(SilhouetteResult {
        points: points.len(),
        permutations,
        observed: t.observed,
        null_mean: t.null_mean,
        null_max: t.null_max,
        p_value: t.p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub h: usize,
    pub silhouette: SilhouetteResult,
    pub export_rows: usize,
    pub ata_best_val: f64,
    /// Absent in latent-only sweeps.
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Train only the autoencoder per `h`; skip generator training and rollouts.
    pub latent_only: bool,
    pub silhouette_points: usize,
    pub permutations: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { latent_only: false, silhouette_points: 600, permutations: 100 }
    }
}

/// The config used for one sweep point: `h` changed, trained from scratch.
pub fn sweep_config(base: &RunConfig, h: usize) -> RunConfig {
    RunConfig { horizon: h, exec_horizon: base.exec_horizon.min(h), use_pretrain: false, ..base.clone() }
}

pub fn horizon_sweep(
    base: &RunConfig,
    horizons: &[usize],
    data_root: &Path,
    run: &RunDir,
    opts: SweepOptions,
) -> Result<Vec<SweepPoint>> {
    let mut suite = downstream_suite(base, data_root, run)?;
    let longest = suite.datasets.iter().flat_map(|d| d.episodes.iter().map(|e| e.len())).max().unwrap_or(0);
    if let Some(&bad) = horizons.iter().find(|&&h| h == 0 || h > longest) {
        return Err(Error::Assertion(format!("horizon {bad} outside [1, {longest}] (longest episode)")));
    }
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let cfg = sweep_config(base, h);
        cfg.validate()?;
        suite.horizon = h;
        run.log(&format!("sweep: h = {h}"));
        let (ata, eval) = if opts.latent_only {
            let (ata, _) =
                train_ata(&cfg, &suite, None, cfg.scaled_epochs(cfg.ata_epochs), &format!("sweep/h{h}/ata"), &run.logger)?;
            (ata, None)
        } else {
            let trained = finetune(&cfg, &suite, None, run)?;
            let policy = policy_from(&cfg, &trained, &suite)?;
            let report = evaluate_policy(
                &policy,
                &eval_settings(&cfg, config_sampler(&cfg))?,
                &format!("h{h}"),
                &config_hash(&cfg),
                cfg.diffusion_steps,
                &run.logger,
            )?;
            (trained.ata, Some(report))
        };
        let export_rows = export_latents(&ata, &suite, &run.report(&format!("latents_h{h}.csv")))?;
        let silhouette = latent_silhouette(&ata, &suite, opts.silhouette_points, opts.permutations, cfg.seed)?;
        let mut vrng = seeded_rng(cfg.seed, "sweep/val");
        let val_refs = suite.val_sample(crate::train::VAL_SAMPLES);
        let (chunks, cond) = suite.batch(&val_refs, None);
        let ata_best_val = ata.loss(&chunks, &cond, cfg.kl_weight, &mut vrng)?.loss;
        run.log(&format!(
            "sweep: h = {h} silhouette {:.4} (null mean {:.4}, p {:.3})",
            silhouette.observed, silhouette.null_mean, silhouette.p_value
        ));
        out.push(SweepPoint { h, silhouette, export_rows, ata_best_val, eval });
    }
    run.write_json("sweep", &out)?;
    Ok(out)
}
