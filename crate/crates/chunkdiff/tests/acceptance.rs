//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Built without the test harness so the verdict lines reach the console. The
//! policy-level criteria train on the desk configuration in a temporary
//! directory; expect roughly half an hour on one CPU core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chunkdiff::ablation::{run_ablation, structural_check, variant_config, Variant};
use chunkdiff::bench::time_inference;
use chunkdiff::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use chunkdiff::datagen::{build_downstream, build_pretrain_mixture};
use chunkdiff::evaluate::{evaluate_policy, evaluate_random, EvalReport};
use chunkdiff::formats::{decode_episode, encode_episode};
use chunkdiff::models::{assemble_policy, frozen_encoders};
use chunkdiff::pipeline::{
    downstream_suite, eval_settings, finetune, policy_from, pretrain, pretrain_suite, warm_start, DOWNSTREAM_EMBODIMENT,
};
use chunkdiff::rundir::RunDir;
use chunkdiff::runfile::{config_hash, config_to_string, load_config, parse_config};
use chunkdiff::sweep::{horizon_sweep, SweepOptions, DEFAULT_HORIZONS};
use chunkdiff::train::train_trajectory;
use chunkdiff_core::ata::{kl_diag_gaussian, AtaModel, AtaShape};
use chunkdiff_core::autograd::{Graph, ParamSet, Var};
use chunkdiff_core::config::{AtaConditioning, LpgKind, RunConfig};
use chunkdiff_core::datapipe::{chunk_actions, compute_action_stats, dim_mask, split_episodes};
use chunkdiff_core::diffusion::{sample, NoiseSchedule, Sampler};
use chunkdiff_core::encoders::{ConditionBatch, ProprioBatch};
use chunkdiff_core::envsuite::{scripted_demo, Embodiment, TaskId, TaskSpec};
use chunkdiff_core::lpg::{DenoiserShape, EpsNet};
use chunkdiff_core::nn::TransformerDims;
use chunkdiff_core::policy::Generator;
use chunkdiff_core::rng::{normal, normal_tensor, seeded_rng};
use chunkdiff_core::tensor::Tensor;
use chunkdiff_core::types::ActionChunk;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    load_config(&path).expect("desk config loads")
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;

/// Worst per-tensor relative error between analytic and central-difference gradients.
fn worst_fd_error(params: &ParamSet, build: &dyn Fn(&mut Graph) -> Var) -> f64 {
    let loss = |p: &ParamSet| {
        let mut g = Graph::new(p);
        let l = build(&mut g);
        g.value(l).item()
    };
    let grads = {
        let mut g = Graph::new(params);
        let l = build(&mut g);
        g.backward(l).into_param_grads(params)
    };
    let mut p = params.clone();
    let mut rng = seeded_rng(0, "acceptance/fd");
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let n = g.data.len();
        let (mut diff, mut scale) = (0.0, 0.0);
        for _ in 0..4.min(n) {
            let j = rng.random_range(0..n);
            let orig = p.tensors_mut()[i].data[j];
            p.tensors_mut()[i].data[j] = orig + FD_STEP;
            let up = loss(&p);
            p.tensors_mut()[i].data[j] = orig - FD_STEP;
            let down = loss(&p);
            p.tensors_mut()[i].data[j] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            diff += (g.data[j] - num).powi(2);
            scale += g.data[j].abs() + num.abs();
        }
        if scale > 1e-9 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

fn tiny_cond(batch: usize, feat: usize, proprio: usize, d_model: usize) -> ConditionBatch {
    let mut rng = seeded_rng(1, "acceptance/cond");
    let p: Vec<Vec<f64>> = (0..batch).map(|_| (0..proprio).map(|_| normal(&mut rng)).collect()).collect();
    let rows: Vec<Option<&[f64]>> = p.iter().map(|v| Some(v.as_slice())).collect();
    ConditionBatch {
        features: normal_tensor(&mut rng, batch, feat).map(f64::abs),
        proprio: ProprioBatch::new(&rows, proprio).unwrap(),
        text: normal_tensor(&mut rng, batch, d_model),
    }
}

fn criterion_1() -> Outcome {
    const D_MODEL: usize = 16;
    const D_Z: usize = 8;
    const H: usize = 4;
    const D_A: usize = 3;
    let dims = TransformerDims { d_model: D_MODEL, heads: 2, ff_dim: 32 };
    let start = Instant::now();
    let cond = tiny_cond(2, 10, 3, D_MODEL);
    let mut rng = seeded_rng(2, "acceptance/grad");
    let chunks: Vec<ActionChunk> = (0..2)
        .map(|_| {
            let v = (0..H * D_A).map(|_| normal(&mut rng).tanh()).collect();
            ActionChunk::dense(v, H, D_A).unwrap()
        })
        .collect();
    let shape = AtaShape {
        horizon: H,
        action_dim: D_A,
        d_z: D_Z,
        feature_dim: 10,
        proprio_dim: 3,
        dims,
        conditioning: AtaConditioning::Obs,
    };
    let ata = AtaModel::new(shape, 3);
    let noise = normal_tensor(&mut rng, 2, D_Z);
    let ata_err = worst_fd_error(&ata.params, &|g| ata.loss_graph(g, &chunks, &cond, 0.3, &noise).unwrap().loss);

    let shape = DenoiserShape { tokens: 1, width: D_Z, feature_dim: 10, proprio_dim: 3, dims, layers: 2, time_embed_dim: 8 };
    let net = EpsNet::new(shape, NoiseSchedule::linear(100).unwrap(), 4, "acceptance/lpg");
    let z0 = normal_tensor(&mut rng, 2, D_Z);
    let eps = normal_tensor(&mut rng, 2, D_Z);
    let lpg_err = worst_fd_error(&net.params, &|g| net.loss_graph(g, &z0, &cond, &[5, 88], &eps).unwrap().loss);
    let secs = start.elapsed().as_secs_f64();
    check(
        ata_err < 1e-4 && lpg_err < 1e-4 && secs < 60.0,
        format!("max relative error: autoencoder {ata_err:.2e}, generator {lpg_err:.2e}; {secs:.1} s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    const N: usize = 100_000;
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000).unwrap();
    let mut rng = seeded_rng(3, "acceptance/forward");
    let z0 = 1.5;
    let mut worst: f64 = 0.0;
    for t in [1, 10, 100, 500, 1000] {
        let closed: Vec<f64> = (0..N).map(|_| s.forward_noise(&[z0], t, &[normal(&mut rng)]).unwrap()[0]).collect();
        let composed: Vec<f64> = (0..N)
            .map(|_| {
                let mut z = z0;
                for k in 1..=t {
                    z = s.alpha_at(k).sqrt() * z + s.beta_at(k).sqrt() * normal(&mut rng);
                }
                z
            })
            .collect();
        let (mc, sc) = mean_std(&closed);
        let (mo, so) = mean_std(&composed);
        let scale = (mo * mo + so * so).sqrt();
        worst = worst.max((mc - mo).abs() / scale).max((sc - so).abs() / so);
    }

    // x0 ~ N(M, S²) has a closed-form noise predictor
    const M: f64 = 0.7;
    const S: f64 = 0.3;
    const SAMPLES: usize = 20_000;
    let eps = |z: &Tensor, t: usize| {
        let ab = s.alpha_bar_at(t);
        let var = ab * S * S + 1.0 - ab;
        z.map(|v| (1.0 - ab).sqrt() * (v - ab.sqrt() * M) / var)
    };
    let ddpm = sample(&eps, &s, Sampler::Ddpm, SAMPLES, 1, &mut seeded_rng(4, "acceptance/ddpm")).unwrap();
    let ddim = sample(&eps, &s, Sampler::Ddim { steps: 50 }, SAMPLES, 1, &mut seeded_rng(5, "acceptance/ddim")).unwrap();
    let (m1, s1) = mean_std(&ddpm.data);
    let (m2, s2) = mean_std(&ddim.data);
    let root_n = (SAMPLES as f64).sqrt();
    let (se1, se2) = (s1 / root_n, s2 / root_n);
    let z_ddpm = (m1 - M).abs() / se1;
    let z_pair = (m1 - m2).abs() / (se1 * se1 + se2 * se2).sqrt();
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 0.01 && z_ddpm < 3.0 && z_pair < 3.0 && secs < 300.0,
        format!(
            "forward noise worst relative gap {:.3}%; DDPM mean {m1:.4} ({z_ddpm:.2} SE); DDIM(50) vs DDPM {z_pair:.2} pooled SE; {secs:.1} s",
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    const N: usize = 1_000_000;
    const D: usize = 4;
    let mut rng = seeded_rng(6, "acceptance/kl");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..D).map(|_| rng.random_range(-1.5..1.5)).collect();
        let sigma: Vec<f64> = (0..D).map(|_| rng.random_range(0.3..2.0)).collect();
        let closed = kl_diag_gaussian(&Tensor::from_vec(1, D, mu.clone()), &Tensor::from_vec(1, D, sigma.clone()));
        let mut total = 0.0;
        for _ in 0..N {
            for d in 0..D {
                let e = normal(&mut rng);
                let z = mu[d] + sigma[d] * e;
                total += -0.5 * e * e - sigma[d].ln() + 0.5 * z * z;
            }
        }
        worst = worst.max((total / N as f64 - closed).abs() / closed);
    }
    check(worst <= 0.01, format!("20 cases, worst relative gap {:.3}%", 100.0 * worst))
}

// ---------------------------------------------------------------- 4

fn criterion_4(cfg: &RunConfig) -> Outcome {
    let mut failures = Vec::new();
    let mut rng = seeded_rng(7, "acceptance/roundtrip");

    let rows: Vec<Vec<f64>> = (0..500).map(|_| (0..4).map(|_| 2.0 * normal(&mut rng)).collect()).collect();
    let stats = compute_action_stats("d", rows.iter().map(Vec::as_slice), 0.01).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| 3.0 * normal(&mut rng)).collect();
        let back = stats.denormalize(&stats.normalize(&x));
        for d in 0..4 {
            worst = worst.max((back[d] - x[d].clamp(stats.low[d], stats.high[d])).abs());
        }
    }
    if worst > 1e-6 {
        failures.push(format!("normalization error {worst:.2e}"));
    }

    let origin = PathBuf::from("desk.toml");
    if parse_config(&config_to_string(cfg), &origin).ok().as_ref() != Some(cfg) {
        failures.push("config round trip".into());
    }

    let enc = frozen_encoders(cfg);
    let ata = AtaModel::new(AtaShape::from_config(cfg, enc.image.feature_dim()), cfg.seed);
    let ck = Checkpoint::new("ata", cfg, 3, &ata.params, &ata.arch);
    match decode_checkpoint(&encode_checkpoint(&ck), &origin, Some(cfg)) {
        Ok(l) if l.checkpoint == ck && l.checkpoint.params.checksum() == ata.params.checksum() => {}
        _ => failures.push("checkpoint round trip".into()),
    }

    let emb = Embodiment::preset(DOWNSTREAM_EMBODIMENT).map_err(|e| e.to_string())?;
    let ep = scripted_demo(&TaskSpec::new(TaskId::Push), &emb, 11).map_err(|e| e.to_string())?;
    if decode_episode(&encode_episode(&ep), &origin).ok().as_ref() != Some(&ep) {
        failures.push("episode round trip".into());
    }

    for (len, h) in [(1, 16), (37, 16), (120, 4), (10, 32)] {
        let actions: Vec<Vec<f64>> = (0..len).map(|i| vec![i as f64; 7]).collect();
        let chunks = chunk_actions(&actions, h, &dim_mask(3, 7));
        let ok = chunks.len() == len && chunks.iter().enumerate().all(|(i, c)| c.real_steps() == (len - i).min(h));
        if !ok {
            failures.push(format!("chunk counts for length {len}, h {h}"));
        }
    }
    for n in [0, 1, 20, 100, 257] {
        let (train, val) = split_episodes(n, 0.05, cfg.seed, "d");
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            failures.push(format!("split of {n} is not a partition"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("normalization max error {worst:.1e}; config, checkpoint and episode bit-exact; chunks and splits exact")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 5-8

struct Desk {
    cfg: RunConfig,
    data: PathBuf,
    root: PathBuf,
}

impl Desk {
    fn run(&self, name: &str) -> RunDir {
        RunDir::create(&self.root.join(name), &self.cfg, false).expect("run directory")
    }
}

struct Policies {
    full_ddpm: EvalReport,
    full_ddim: EvalReport,
    random: EvalReport,
    non_diffusion: EvalReport,
    latent_secs: f64,
    trajectory_secs: f64,
}

fn train_and_evaluate(desk: &Desk) -> Result<Policies, String> {
    let e = |e: chunkdiff::Error| e.to_string();
    let cfg = &desk.cfg;
    let run = desk.run("full");
    let t0 = Instant::now();
    let pre = pretrain(cfg, &pretrain_suite(cfg, &desk.data, &run).map_err(e)?, &run).map_err(e)?;
    let suite = downstream_suite(cfg, &desk.data, &run).map_err(e)?;
    let init = warm_start(cfg, &pre.ata, &pre.generator, suite.feature_dim, &run).map_err(e)?;
    let trained = finetune(cfg, &suite, Some(init), &run).map_err(e)?;
    let policy = policy_from(cfg, &trained, &suite).map_err(e)?;
    eprintln!("  full model trained in {:.0} s", t0.elapsed().as_secs_f64());

    let hash = config_hash(cfg);
    let total = cfg.diffusion_steps;
    let t0 = Instant::now();
    let full_ddpm =
        evaluate_policy(&policy, &eval_settings(cfg, Sampler::Ddpm).map_err(e)?, "full", &hash, total, &run.logger).map_err(e)?;
    let full_ddim =
        evaluate_policy(&policy, &eval_settings(cfg, Sampler::Ddim { steps: 50 }).map_err(e)?, "full", &hash, total, &run.logger)
            .map_err(e)?;
    let random = evaluate_random(&eval_settings(cfg, Sampler::Ddpm).map_err(e)?, &hash, &run.logger).map_err(e)?;
    eprintln!("  evaluated in {:.0} s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let ablation = run_ablation(cfg, Variant::NonDiffusionLpg, &desk.data, &desk.run("non_diffusion_lpg")).map_err(e)?;
    eprintln!("  regression ablation in {:.0} s", t0.elapsed().as_secs_f64());

    // Timing only: the baseline's weights do not change its cost per call.
    let t0 = Instant::now();
    let (baseline, _) = train_trajectory(cfg, &suite, 1, "baseline/trajectory", &run.logger).map_err(e)?;
    let baseline = assemble_policy(cfg, None, Generator::Trajectory(baseline), suite.stats_by_embodiment()).map_err(e)?;
    let latent_secs = time_inference(&policy, Sampler::Ddpm, cfg.bench_iterations, cfg.seed).map_err(e)?;
    let trajectory_secs = time_inference(&baseline, Sampler::Ddpm, cfg.bench_iterations, cfg.seed).map_err(e)?;
    eprintln!("  benchmark in {:.0} s", t0.elapsed().as_secs_f64());

    Ok(Policies { full_ddpm, full_ddim, random, non_diffusion: ablation.eval, latent_secs, trajectory_secs })
}

fn criterion_5(p: &Policies) -> Outcome {
    let (full, random, reg) = (p.full_ddpm.average, p.random.average, p.non_diffusion.average);
    check(
        full >= random + 0.40 && full >= reg,
        format!("full {full:.3} vs random {random:.3} (margin {:+.3}); non_diffusion_lpg {reg:.3}", full - random),
    )
}

fn criterion_6(cfg: &RunConfig) -> Outcome {
    let feature_dim = frozen_encoders(cfg).image.feature_dim();
    let mut details = Vec::new();
    let mut ok = true;
    for v in [Variant::ObsAgnosticAta, Variant::TaskAwareAta] {
        let (vcfg, delta) = variant_config(cfg, v).map_err(|e| e.to_string())?;
        let s = structural_check(&vcfg, feature_dim).map_err(|e| e.to_string())?;
        ok &= s.passed && delta.len() == 1;
        details.push(format!("{v}: image grad {:.2e}, text grad {:.2e}, delta {delta:?}", s.image_grad_norm, s.text_grad_norm));
    }
    let (full, _) = variant_config(cfg, Variant::Full).map_err(|e| e.to_string())?;
    let s = structural_check(&full, feature_dim).map_err(|e| e.to_string())?;
    ok &= s.passed && full.ata_conditioning == AtaConditioning::Obs && full.lpg_kind == LpgKind::Diffusion;
    check(ok, details.join("; "))
}

fn criterion_7(p: &Policies) -> Outcome {
    let speedup = p.trajectory_secs / p.latent_secs;
    let gap = (p.full_ddim.average - p.full_ddpm.average).abs();
    check(
        speedup >= 1.5 && gap <= 0.05,
        format!(
            "DDPM(1000) call: latent {:.3} s, trajectory {:.3} s ({speedup:.2}x); success DDIM(50) {:.3} vs DDPM(1000) {:.3}",
            p.latent_secs, p.trajectory_secs, p.full_ddim.average, p.full_ddpm.average
        ),
    )
}

/// Autoencoder-only sweep at a fifth of the fine-tuning epochs per horizon.
fn criterion_8(desk: &Desk) -> Outcome {
    let cfg = RunConfig { ata_epochs: desk.cfg.ata_epochs.div_ceil(5), ..desk.cfg.clone() };
    let run = desk.run("sweep");
    let opts = SweepOptions { latent_only: true, ..SweepOptions::default() };
    let pts = horizon_sweep(&cfg, &DEFAULT_HORIZONS, &desk.data, &run, opts).map_err(|e| e.to_string())?;
    let line: Vec<String> = pts.iter().map(|p| format!("h={} {:.3}", p.h, p.silhouette.observed)).collect();
    let h16 = pts.iter().find(|p| p.h == 16).ok_or("no h=16 point")?;
    check(
        h16.silhouette.p_value < 0.05,
        format!(
            "h=16 silhouette {:.3}, null max {:.3}, p {:.3}; sweep: {}",
            h16.silhouette.observed,
            h16.silhouette.null_max,
            h16.silhouette.p_value,
            line.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; listing must not trigger the long run
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let cfg = desk_config();
    let mut verdicts: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n}: PASS  {d}"),
            Err(d) => println!("criterion {n}: FAIL  {d}"),
        }
        verdicts.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4(&cfg));

    let tmp = tempfile::tempdir().expect("temporary directory");
    let data = tmp.path().join("data");
    let tasks = TaskId::ALL;
    let generated = build_pretrain_mixture(&data, 3, &tasks, 20, cfg.seed, cfg.step_limit)
        .and_then(|_| build_downstream(&data, DOWNSTREAM_EMBODIMENT, &tasks, 50, cfg.seed, cfg.step_limit));
    let desk = Desk { cfg: cfg.clone(), data, root: tmp.path().join("runs") };
    let t0 = Instant::now();
    match generated.map_err(|e| e.to_string()).and_then(|_| train_and_evaluate(&desk)) {
        Ok(p) => {
            report(5, criterion_5(&p));
            report(6, criterion_6(&cfg));
            report(7, criterion_7(&p));
        }
        Err(e) => {
            for n in [5, 7] {
                report(n, Err(format!("pipeline failed: {e}")));
            }
            report(6, criterion_6(&cfg));
        }
    }
    report(8, criterion_8(&desk));
    eprintln!("  policy criteria took {:.0} s", t0.elapsed().as_secs_f64());

    let failed: Vec<usize> = verdicts.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all 8 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
