//! Ablation variants: each differs from the full model in exactly one config key.

use std::fmt;
use std::path::Path;

use chunkdiff_core::ata::{AtaModel, AtaShape};
use chunkdiff_core::autograd::Graph;
use chunkdiff_core::config::{AtaConditioning, LpgKind, RunConfig};
use chunkdiff_core::encoders::{ConditionBatch, ProprioBatch};
use chunkdiff_core::rng::{normal_tensor, seeded_rng};
use chunkdiff_core::types::ActionChunk;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate_policy, EvalReport};
use crate::pipeline::{
    config_sampler, downstream_suite, eval_settings, finetune, policy_from, pretrain, pretrain_suite, warm_start,
};
use crate::rundir::RunDir;
use crate::runfile::{config_diff, config_hash};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NonDiffusionLpg,
    TaskAwareAta,
    ObsAgnosticAta,
    NoPretrain,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::NonDiffusionLpg, Variant::TaskAwareAta, Variant::ObsAgnosticAta, Variant::NoPretrain];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NonDiffusionLpg => "non_diffusion_lpg",
            Variant::TaskAwareAta => "task_aware_ata",
            Variant::ObsAgnosticAta => "obs_agnostic_ata",
            Variant::NoPretrain => "no_pretrain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::UnknownVariant(s.into()))
    }

    fn apply(self, c: &mut RunConfig) {
        match self {
            Variant::Full => {}
            Variant::NonDiffusionLpg => c.lpg_kind = LpgKind::Regression,
            Variant::TaskAwareAta => c.ata_conditioning = AtaConditioning::ObsText,
            Variant::ObsAgnosticAta => c.ata_conditioning = AtaConditioning::None,
            Variant::NoPretrain => c.use_pretrain = false,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `base` with the full model's settings for every key a variant may touch.
pub fn full_config(base: &RunConfig) -> RunConfig {
    RunConfig { lpg_kind: LpgKind::Diffusion, ata_conditioning: AtaConditioning::Obs, use_pretrain: true, ..base.clone() }
}

/// The resolved config of `v` and the keys in which it differs from the full model.
pub fn variant_config(base: &RunConfig, v: Variant) -> Result<(RunConfig, Vec<String>)> {
    let full = full_config(base);
    let mut c = full.clone();
    v.apply(&mut c);
    let delta = config_diff(&full, &c);
    let expected = if v == Variant::Full { 0 } else { 1 };
    if delta.len() != expected {
        return Err(Error::Assertion(format!("variant {v} differs from full in {delta:?}, expected {expected} key(s)")));
    }
    Ok((c, delta))
}

/// Gradient norms of the autoencoder loss with respect to its two condition inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralCheck {
    pub conditioning: AtaConditioning,
    pub image_grad_norm: f64,
    pub text_grad_norm: f64,
    /// Image path live iff observations are used; text path live iff instructions are.
    pub passed: bool,
}

pub fn structural_check(cfg: &RunConfig, feature_dim: usize) -> Result<StructuralCheck> {
    let model = AtaModel::new(AtaShape::from_config(cfg, feature_dim), cfg.seed);
    let batch = 3;
    let mut rng = seeded_rng(cfg.seed, "ablation/structural");
    let chunks: Vec<ActionChunk> = (0..batch)
        .map(|_| {
            let v = normal_tensor(&mut rng, 1, cfg.horizon * cfg.action_dim).data.iter().map(|x| x.tanh()).collect();
            ActionChunk::dense(v, cfg.horizon, cfg.action_dim).expect("chunk shape")
        })
        .collect();
    let cond = ConditionBatch {
        features: normal_tensor(&mut rng, batch, feature_dim).map(f64::abs),
        proprio: ProprioBatch::absent(batch, cfg.proprio_dim),
        text: normal_tensor(&mut rng, batch, cfg.d_model),
    };
    let noise = normal_tensor(&mut rng, batch, cfg.d_z);
    let mut g = Graph::new(&model.params);
    let v = model.loss_graph(&mut g, &chunks, &cond, cfg.kl_weight, &noise)?;
    let grads = g.backward(v.loss);
    let norm = |var| grads.wrt(var).map_or(0.0, |t| t.sq_norm().sqrt());
    let (image_grad_norm, text_grad_norm) = (norm(v.features), norm(v.text));
    let c = cfg.ata_conditioning;
    let passed =
        (image_grad_norm > 0.0) == (c != AtaConditioning::None) && (text_grad_norm > 0.0) == (c == AtaConditioning::ObsText);
    Ok(StructuralCheck { conditioning: c, image_grad_norm, text_grad_norm, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub config_delta: Vec<String>,
    pub structural: StructuralCheck,
    pub eval: EvalReport,
}

/// Per-task success difference between a run with pre-training and one without.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainGain {
    pub per_task: Vec<(String, f64)>,
    pub average: f64,
}

pub fn pretrain_gain(with: &EvalReport, without: &EvalReport) -> Result<PretrainGain> {
    let mut per_task = Vec::with_capacity(with.tasks.len());
    for t in &with.tasks {
        let o = without.task(&t.task).ok_or_else(|| Error::Incompatible(format!("task {} missing from comparison", t.task)))?;
        per_task.push((t.task.clone(), t.success_rate - o.success_rate));
    }
    let average = per_task.iter().map(|(_, d)| d).sum::<f64>() / per_task.len().max(1) as f64;
    Ok(PretrainGain { per_task, average })
}

/// Pre-trains (unless disabled), fine-tunes and evaluates one variant in `run`.
pub fn run_ablation(base: &RunConfig, v: Variant, data_root: &Path, run: &RunDir) -> Result<AblationReport> {
    let (cfg, config_delta) = variant_config(base, v)?;
    run.log(&format!("ablation {v}: delta {config_delta:?}"));
    let suite = downstream_suite(&cfg, data_root, run)?;
    let structural = structural_check(&cfg, suite.feature_dim)?;
    if !structural.passed {
        return Err(Error::Assertion(format!("structural gradient check failed for {v}: {structural:?}")));
    }
    let init = if cfg.use_pretrain {
        let pre_suite = pretrain_suite(&cfg, data_root, run)?;
        let pre = pretrain(&cfg, &pre_suite, run)?;
        Some(warm_start(&cfg, &pre.ata, &pre.generator, suite.feature_dim, run)?)
    } else {
        None
    };
    let trained = finetune(&cfg, &suite, init, run)?;
    let policy = policy_from(&cfg, &trained, &suite)?;
    let eval = evaluate_policy(
        &policy,
        &eval_settings(&cfg, config_sampler(&cfg))?,
        v.as_str(),
        &config_hash(&cfg),
        cfg.diffusion_steps,
        &run.logger,
    )?;
    let report = AblationReport { variant: v, config_delta, structural, eval };
    run.write_json(&format!("ablation_{v}"), &report)?;
    Ok(report)
}
