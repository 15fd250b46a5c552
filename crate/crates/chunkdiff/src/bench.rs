//! Inference timing for each sampler setting, against the trajectory-space baseline.

use std::fmt::Write as _;
use std::time::Instant;

use chunkdiff_core::config::RunConfig;
use chunkdiff_core::diffusion::Sampler;
use chunkdiff_core::envsuite::{reset, Embodiment, TaskId, TaskSpec};
use chunkdiff_core::policy::Policy;
use chunkdiff_core::rng::seeded_rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluate::{evaluate_policy, EvalReport};
use crate::pipeline::{eval_settings, DOWNSTREAM_EMBODIMENT};
use crate::rundir::Logger;
use crate::runfile::config_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub sampler: String,
    pub steps: usize,
    /// Mean wall-clock seconds of one full single-observation inference call.
    pub seconds_per_call: f64,
    pub success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub rows: Vec<BenchRow>,
    /// Baseline time over latent-model time, both with ancestral sampling over all steps.
    pub speedup_vs_baseline: f64,
    pub evals: Vec<EvalReport>,
}

impl BenchReport {
    pub fn row(&self, model: &str, sampler: &str, steps: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.sampler == sampler && r.steps == steps)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<8} {:>6} {:>14} {:>9}", "model", "sampler", "steps", "s/iteration", "success");
        for r in &self.rows {
            let succ = r.success.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(s, "{:<12} {:<8} {:>6} {:>14.6} {:>9}", r.model, r.sampler, r.steps, r.seconds_per_call, succ);
        }
        let _ =
            writeln!(s, "speedup over trajectory baseline: {:.2}x ({} iterations)", self.speedup_vs_baseline, self.iterations);
        s
    }
}

/// DDPM over every step, then DDIM at 250, 100 and 50 steps where `T` allows.
pub fn default_settings(total_steps: usize) -> Vec<Sampler> {
    let mut v = vec![Sampler::Ddpm];
    v.extend([250, 100, 50].into_iter().filter(|&s| s < total_steps).map(|steps| Sampler::Ddim { steps }));
    v
}

fn sampler_parts(s: Sampler, total: usize) -> (String, usize) {
    match s {
        Sampler::Ddpm => ("ddpm".into(), total),
        Sampler::Ddim { steps } => ("ddim".into(), steps),
    }
}

/// Mean seconds per single-observation call over `iterations`, after one warm-up call.
pub fn time_inference(policy: &Policy, sampler: Sampler, iterations: usize, seed: u64) -> Result<f64> {
    let emb = Embodiment::preset(DOWNSTREAM_EMBODIMENT)?;
    let (_, frame) = reset(&TaskSpec::new(TaskId::Reach), &emb, seed);
    let frames = [frame];
    let mut rng = seeded_rng(seed, "bench/timing");
    policy.generate_actions(&frames, sampler, &mut rng)?;
    let t = Instant::now();
    for _ in 0..iterations {
        policy.generate_actions(&frames, sampler, &mut rng)?;
    }
    Ok(t.elapsed().as_secs_f64() / iterations.max(1) as f64)
}

pub fn benchmark(
    cfg: &RunConfig,
    policy: &Policy,
    baseline: &Policy,
    settings: &[Sampler],
    with_success: bool,
    log: &Logger,
) -> Result<BenchReport> {
    let iterations = cfg.bench_iterations;
    let total = cfg.diffusion_steps;
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for &s in settings {
        let (sampler, steps) = sampler_parts(s, total);
        let secs = time_inference(policy, s, iterations, cfg.seed)?;
        log.log(&format!("bench: latent {sampler}({steps}) {secs:.6} s/iteration"));
        let success = if with_success {
            let r = evaluate_policy(
                policy,
                &eval_settings(cfg, s)?,
                &format!("bench {sampler}{steps}"),
                &config_hash(cfg),
                total,
                log,
            )?;
            let avg = r.average;
            evals.push(r);
            Some(avg)
        } else {
            None
        };
        rows.push(BenchRow { model: "latent".into(), sampler, steps, seconds_per_call: secs, success });
    }
    let base_secs = time_inference(baseline, Sampler::Ddpm, iterations, cfg.seed)?;
    log.log(&format!("bench: trajectory ddpm({total}) {base_secs:.6} s/iteration"));
    rows.push(BenchRow {
        model: "trajectory".into(),
        sampler: "ddpm".into(),
        steps: total,
        seconds_per_call: base_secs,
        success: None,
    });
    let latent_ddpm = rows.iter().find(|r| r.model == "latent" && r.sampler == "ddpm").map(|r| r.seconds_per_call);
    let latent_ddpm = match latent_ddpm {
        Some(v) => v,
        None => time_inference(policy, Sampler::Ddpm, iterations, cfg.seed)?,
    };
    Ok(BenchReport { iterations, rows, speedup_vs_baseline: base_secs / latent_ddpm, evals })
}
