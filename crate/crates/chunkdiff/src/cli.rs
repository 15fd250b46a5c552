//! Command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chunkdiff_core::config::{LpgKind, RunConfig, SamplerKind};
use chunkdiff_core::datapipe::{chunk_actions, compute_action_stats, dim_mask};
use chunkdiff_core::diffusion::Sampler;
use chunkdiff_core::envsuite::{replay_matches, scripted_demo, Embodiment, TaskId, TaskSpec};
use chunkdiff_core::policy::Generator;
use chunkdiff_core::rng::seeded_rng;
use chunkdiff_core::types::Image;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{run_ablation, Variant};
use crate::bench::{benchmark, default_settings};
use crate::datagen::{build_downstream, build_pretrain_mixture};
use crate::dataset::{DataSuite, Split};
use crate::error::{io_err, Error, Result};
use crate::evaluate::{evaluate_policy, evaluate_random};
use crate::export::export_latents;
use crate::formats::{episode_path, read_episode, read_manifest, validate_manifest, write_episode};
use crate::models::{load_ata, load_epsnet, KIND_LPG};
use crate::pipeline::{
    downstream_suite, eval_settings, finetune, load_baseline_policy, load_policy, load_pretrained, pretrain, pretrain_suite,
    train_baseline, DOWNSTREAM_EMBODIMENT,
};
use crate::rundir::RunDir;
use crate::runfile::{config_hash, load_config};
use crate::sweep::{horizon_sweep, SweepOptions, DEFAULT_HORIZONS};
use crate::train::train_ata;

#[derive(Parser, Debug)]
#[command(name = "chunkdiff", version, about = "Latent action-chunk diffusion policies on a synthetic manipulation suite")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run file (TOML); defaults to `<run>/config.toml` when present, else built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run file's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataRun {
    /// Data root written by `generate-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, logs and reports.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplerArg {
    Ddpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Space {
    Latent,
    Trajectory,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the pre-training mixture and the downstream suite.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        pretrain_embodiments: usize,
        #[arg(long, default_value_t = 20)]
        pretrain_episodes: usize,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-embodiment pre-training of the autoencoder and generator.
    Pretrain {
        #[command(flatten)]
        dr: DataRun,
        #[command(flatten)]
        common: Common,
    },
    /// Downstream training, warm-started from pre-training when `use_pretrain` is set.
    Finetune {
        #[command(flatten)]
        dr: DataRun,
        /// Run directory holding the pre-training checkpoints (default: `--run`).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop evaluation of a fine-tuned run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Evaluate uniform random actions instead of the trained policy.
        #[arg(long)]
        random: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate an ablation variant (or `all`) in `<run>/<variant>`.
    Ablate {
        #[command(flatten)]
        dr: DataRun,
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train per horizon, export latents, and score skill clustering.
    SweepHorizon {
        #[command(flatten)]
        dr: DataRun,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS.to_vec())]
        h: Vec<usize>,
        #[arg(long)]
        latent_only: bool,
        #[arg(long, default_value_t = 600)]
        points: usize,
        #[arg(long, default_value_t = 100)]
        permutations: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Inference timing per sampler setting against the trajectory baseline.
    Bench {
        #[arg(long)]
        run: PathBuf,
        /// Skip the closed-loop success column.
        #[arg(long)]
        no_success: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write posterior means of every downstream chunk as CSV.
    ExportLatents {
        #[command(flatten)]
        dr: DataRun,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dataset inspection.
    Datapipe {
        #[command(subcommand)]
        cmd: DatapipeCmd,
    },
    /// Action autoencoder alone.
    Ata {
        #[command(subcommand)]
        cmd: AtaCmd,
    },
    /// Latent generator alone.
    Lpg {
        #[command(subcommand)]
        cmd: LpgCmd,
    },
    /// Environment suite.
    Envsuite {
        #[command(subcommand)]
        cmd: EnvCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatapipeCmd {
    /// Per-dimension normalization statistics of one manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check that every listed episode exists and matches the manifest.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print one episode's chunks and optionally write a frame as PPM.
    Preview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        ppm: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand, Debug)]
pub enum AtaCmd {
    /// Train the autoencoder on downstream data.
    Train {
        #[command(flatten)]
        dr: DataRun,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction error on the validation split.
    Reconstruct {
        #[command(flatten)]
        dr: DataRun,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand, Debug)]
pub enum LpgCmd {
    /// Train the generator against the run's frozen autoencoder, or the trajectory baseline.
    Train {
        #[command(flatten)]
        dr: DataRun,
        #[arg(long, value_enum, default_value_t = Space::Latent)]
        space: Space,
        #[command(flatten)]
        common: Common,
    },
    /// Sample latents for validation frames and decode them.
    Sample {
        #[command(flatten)]
        dr: DataRun,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand, Debug)]
pub enum EnvCmd {
    /// Write one scripted demonstration.
    Generate {
        #[arg(long)]
        task: String,
        #[arg(long, default_value = DOWNSTREAM_EMBODIMENT)]
        embodiment: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Replay an episode file from its reset seed and compare every frame.
    Replay {
        #[arg(long)]
        episode: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Explicit `--config`, else `<run>/config.toml`, else defaults; then `--seed`.
pub fn resolve_config(common: &Common, run: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, run.map(|r| r.join("config.toml"))) {
        (Some(p), _) => load_config(p)?,
        (None, Some(p)) if p.is_file() => load_config(&p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sampler_from(cfg: &RunConfig, arg: Option<SamplerArg>, steps: Option<usize>) -> Result<Sampler> {
    let kind = match arg {
        Some(SamplerArg::Ddpm) => SamplerKind::Ddpm,
        Some(SamplerArg::Ddim) => SamplerKind::Ddim,
        None => cfg.sampler,
    };
    let steps = steps.unwrap_or(if arg.is_some() && kind == SamplerKind::Ddpm { cfg.diffusion_steps } else { cfg.sampler_steps });
    let probe = RunConfig { sampler: kind, sampler_steps: steps, ..cfg.clone() };
    probe.validate()?;
    Ok(Sampler::from_kind(kind, steps))
}

fn open_run(path: &Path, cfg: &RunConfig, common: &Common) -> Result<RunDir> {
    RunDir::create(path, cfg, !common.quiet)
}

fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    std::fs::write(path, out).map_err(io_err(path))
}

fn print_chunk_rows(values: &[f64], horizon: usize, width: usize) {
    for i in 0..horizon {
        let row: Vec<String> = values[i * width..(i + 1) * width].iter().map(|v| format!("{v:+.3}")).collect();
        println!("  {}", row.join(" "));
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { out, pretrain_embodiments, pretrain_episodes, episodes, common } => {
            let cfg = resolve_config(&common, None)?;
            let tasks = TaskId::ALL;
            let pre = build_pretrain_mixture(&out, pretrain_embodiments, &tasks, pretrain_episodes, cfg.seed, cfg.step_limit)?;
            let down = build_downstream(&out, DOWNSTREAM_EMBODIMENT, &tasks, episodes, cfg.seed, cfg.step_limit)?;
            for p in pre.iter().chain([&down]) {
                println!("{}", p.display());
            }
        }
        Command::Pretrain { dr, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let suite = pretrain_suite(&cfg, &dr.data, &run)?;
            let t = pretrain(&cfg, &suite, &run)?;
            for l in &t.logs {
                println!("{}: best val {:.5} at epoch {}", l.phase, l.best_val, l.best_epoch);
            }
        }
        Command::Finetune { dr, pretrained, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let suite = downstream_suite(&cfg, &dr.data, &run)?;
            let init = if cfg.use_pretrain {
                let src = pretrained.unwrap_or_else(|| dr.run.clone());
                let src = RunDir { root: src, logger: crate::rundir::Logger::silent() };
                Some(load_pretrained(&cfg, &src, suite.feature_dim, &run)?)
            } else {
                None
            };
            let t = finetune(&cfg, &suite, init, &run)?;
            for l in &t.logs {
                println!("{}: best val {:.5} at epoch {}", l.phase, l.best_val, l.best_epoch);
            }
        }
        Command::Evaluate { run: path, sampler, steps, trials, random, common } => {
            let mut cfg = resolve_config(&common, Some(&path))?;
            if let Some(n) = trials {
                cfg.n_trials = n;
            }
            let s = sampler_from(&cfg, sampler, steps)?;
            let run = open_run(&path, &cfg, &common)?;
            let settings = eval_settings(&cfg, s)?;
            let report = if random {
                evaluate_random(&settings, &config_hash(&cfg), &run.logger)?
            } else {
                let policy = load_policy(&cfg, &run)?;
                evaluate_policy(&policy, &settings, "policy", &config_hash(&cfg), cfg.diffusion_steps, &run.logger)?
            };
            let name =
                if random { "eval_random".to_string() } else { format!("eval_{}{}", report.sampler, report.sampler_steps) };
            run.write_json(&name, &report)?;
            println!("{}", report.summary());
        }
        Command::Ablate { dr, variant, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let variants = if variant == "all" { Variant::ALL.to_vec() } else { vec![Variant::parse(&variant)?] };
            for v in variants {
                let run = open_run(&dr.run.join(v.as_str()), &cfg, &common)?;
                let r = run_ablation(&cfg, v, &dr.data, &run)?;
                println!("{}", r.eval.summary());
            }
        }
        Command::SweepHorizon { dr, h, latent_only, points, permutations, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let pts =
                horizon_sweep(&cfg, &h, &dr.data, &run, SweepOptions { latent_only, silhouette_points: points, permutations })?;
            println!("{:>4} {:>11} {:>10} {:>8} {:>9}", "h", "silhouette", "null mean", "p", "success");
            for p in pts {
                let succ = p.eval.as_ref().map_or("-".to_string(), |e| format!("{:.3}", e.average));
                println!(
                    "{:>4} {:>11.4} {:>10.4} {:>8.3} {:>9}",
                    p.h, p.silhouette.observed, p.silhouette.null_mean, p.silhouette.p_value, succ
                );
            }
        }
        Command::Bench { run: path, no_success, common } => {
            let cfg = resolve_config(&common, Some(&path))?;
            let run = open_run(&path, &cfg, &common)?;
            let baseline = load_baseline_policy(&cfg, &run)?;
            let policy = load_policy(&cfg, &run)?;
            let report = benchmark(&cfg, &policy, &baseline, &default_settings(cfg.diffusion_steps), !no_success, &run.logger)?;
            run.write_json("bench", &report)?;
            let table = report.table();
            run.write_text("bench.txt", &table)?;
            print!("{table}");
        }
        Command::ExportLatents { dr, out, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let ata = load_ata(&run.checkpoint("ata"), &cfg)?;
            let suite = downstream_suite(&cfg, &dr.data, &run)?;
            let rows = export_latents(&ata.model, &suite, &out)?;
            println!("{rows} rows -> {}", out.display());
        }
        Command::Datapipe { cmd } => datapipe(cmd)?,
        Command::Ata { cmd } => ata(cmd)?,
        Command::Lpg { cmd } => lpg(cmd)?,
        Command::Envsuite { cmd } => envsuite(cmd)?,
    }
    Ok(())
}

fn datapipe(cmd: DatapipeCmd) -> Result<()> {
    match cmd {
        DatapipeCmd::Stats { manifest, common } => {
            let cfg = resolve_config(&common, None)?;
            let m = read_manifest(&manifest)?;
            let eps = m.episodes.iter().map(|e| read_episode(&episode_path(&manifest, &e.path))).collect::<Result<Vec<_>>>()?;
            let stats = compute_action_stats(
                &m.dataset_id,
                eps.iter().flat_map(|e| e.actions.iter().map(Vec::as_slice)),
                cfg.clip_quantile,
            )?;
            let frames: usize = eps.iter().map(|e| e.len()).sum();
            println!("dataset {} ({}), {} episodes, {frames} frames", m.dataset_id, m.embodiment_id, eps.len());
            println!("{:>4} {:>10} {:>10} {:>10} {:>10}", "dim", "low", "high", "min", "max");
            for i in 0..stats.dim() {
                println!("{i:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", stats.low[i], stats.high[i], stats.min[i], stats.max[i]);
            }
            println!("{}", serde_json::to_string(&stats).map_err(|e| Error::Format(e.to_string()))?);
        }
        DatapipeCmd::Validate { manifest, common } => {
            resolve_config(&common, None)?;
            let m = read_manifest(&manifest)?;
            let problems = validate_manifest(&m, &manifest)?;
            for p in &problems {
                println!("{p}");
            }
            if !problems.is_empty() {
                return Err(Error::Assertion(format!("{} problem(s) in {}", problems.len(), manifest.display())));
            }
            println!("{}: {} episodes ok", manifest.display(), m.episodes.len());
        }
        DatapipeCmd::Preview { manifest, episode, frame, ppm, common } => {
            let cfg = resolve_config(&common, None)?;
            let m = read_manifest(&manifest)?;
            let entry = m.episodes.get(episode).ok_or_else(|| Error::Format(format!("no episode {episode}")))?;
            let ep = read_episode(&episode_path(&manifest, &entry.path))?;
            println!("{} | {} | {} frames | views {:?} | \"{}\"", entry.path, ep.task_id, ep.len(), ep.view_ids, ep.instruction);
            let dims = dim_mask(m.native_action_dim, m.native_action_dim);
            let chunks = chunk_actions(&ep.actions, cfg.horizon, &dims);
            let c = chunks.get(frame).ok_or_else(|| Error::Format(format!("no frame {frame}")))?;
            println!("raw chunk at frame {frame} ({} real steps):", c.real_steps());
            print_chunk_rows(&c.values, c.horizon, c.action_dim);
            if let Some(p) = ppm {
                write_ppm(&ep.images[0][frame], &p)?;
                println!("view {} frame {frame} -> {}", ep.view_ids[0], p.display());
            }
        }
    }
    Ok(())
}

fn val_batch(suite: &DataSuite, n: usize) -> Vec<chunkdiff_core::datapipe::SampleRef> {
    let v = suite.val_sample(n);
    if v.is_empty() {
        suite.refs(Split::Train).into_iter().flatten().take(n).collect()
    } else {
        v
    }
}

fn ata(cmd: AtaCmd) -> Result<()> {
    match cmd {
        AtaCmd::Train { dr, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let suite = downstream_suite(&cfg, &dr.data, &run)?;
            let (model, log) = train_ata(&cfg, &suite, None, cfg.scaled_epochs(cfg.ata_epochs), "ata", &run.logger)?;
            crate::models::save_ata(&run.checkpoint("ata"), &cfg, &model, &suite.stats_by_embodiment(), Some(&log))?;
            println!("ata: best val {:.5} at epoch {}", log.best_val, log.best_epoch);
        }
        AtaCmd::Reconstruct { dr, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let ata = load_ata(&run.checkpoint("ata"), &cfg)?.model;
            let suite = downstream_suite(&cfg, &dr.data, &run)?;
            let refs = val_batch(&suite, 256);
            let (chunks, cond) = suite.batch(&refs, None);
            let post = ata.encode(&chunks, &cond)?;
            let recon = ata.decode(&post.mu, &cond)?;
            let (mut se, mut n) = (0.0, 0.0);
            for (a, b) in chunks.iter().zip(&recon) {
                for ((x, y), m) in a.values.iter().zip(&b.values).zip(a.loss_mask()) {
                    se += m * (x - y).powi(2);
                    n += m;
                }
            }
            println!("reconstruction mse over {} chunks: {:.6}", chunks.len(), se / n.max(1.0));
            println!("first chunk, target then reconstruction:");
            print_chunk_rows(&chunks[0].values, cfg.horizon, cfg.action_dim);
            println!("  --");
            print_chunk_rows(&recon[0].values, cfg.horizon, cfg.action_dim);
        }
    }
    Ok(())
}

fn lpg(cmd: LpgCmd) -> Result<()> {
    match cmd {
        LpgCmd::Train { dr, space, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let suite = downstream_suite(&cfg, &dr.data, &run)?;
            if space == Space::Trajectory {
                let (_, log) = train_baseline(&cfg, &suite, &run)?;
                println!("trajectory: best val {:.5} at epoch {}", log.best_val, log.best_epoch);
                return Ok(());
            }
            if cfg.lpg_kind != LpgKind::Diffusion {
                return Err(Error::Incompatible("lpg train needs lpg_kind = \"diffusion\"".into()));
            }
            let ata = load_ata(&run.checkpoint("ata"), &cfg)?.model;
            let (net, log) =
                crate::train::train_lpg(&cfg, &suite, &ata, None, cfg.scaled_epochs(cfg.lpg_epochs), "lpg", &run.logger)?;
            crate::models::save_epsnet(&run.checkpoint("lpg"), KIND_LPG, &cfg, &net, &suite.stats_by_embodiment(), Some(&log))?;
            println!("lpg: best val {:.5} at epoch {}", log.best_val, log.best_epoch);
        }
        LpgCmd::Sample { dr, sampler, steps, n, common } => {
            let cfg = resolve_config(&common, Some(&dr.run))?;
            let s = sampler_from(&cfg, sampler, steps)?;
            let run = open_run(&dr.run, &cfg, &common)?;
            let ata = load_ata(&run.checkpoint("ata"), &cfg)?.model;
            let net = load_epsnet(&run.checkpoint("lpg"), KIND_LPG, &cfg)?.model;
            let suite = downstream_suite(&cfg, &dr.data, &run)?;
            let refs = val_batch(&suite, n);
            let (chunks, cond) = suite.batch(&refs, None);
            let policy =
                crate::models::assemble_policy(&cfg, Some(ata), Generator::LatentDiffusion(net), suite.stats_by_embodiment())?;
            let mut rng = seeded_rng(cfg.seed, "cli/lpg-sample");
            let out = policy.generate_normalized(&cond, s, &mut rng)?;
            for (i, (target, sample)) in chunks.iter().zip(&out).enumerate() {
                let mse = target.values.iter().zip(&sample.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    / target.values.len() as f64;
                println!("sample {i} ({}): mse to demonstration {mse:.4}", suite.episode(refs[i]).task_id);
                print_chunk_rows(&sample.values, cfg.horizon, cfg.action_dim);
            }
        }
    }
    Ok(())
}

fn envsuite(cmd: EnvCmd) -> Result<()> {
    match cmd {
        EnvCmd::Generate { task, embodiment, out, common } => {
            let cfg = resolve_config(&common, None)?;
            let spec = TaskSpec::new(TaskId::parse(&task)?).with_step_limit(cfg.step_limit);
            let emb = Embodiment::preset(&embodiment)?;
            let ep = scripted_demo(&spec, &emb, cfg.seed)?;
            write_episode(&ep, &out)?;
            println!("{}: {} frames, seed {}, \"{}\"", out.display(), ep.len(), ep.seed, ep.instruction);
        }
        EnvCmd::Replay { episode, common } => {
            let cfg = resolve_config(&common, None)?;
            let ep = read_episode(&episode)?;
            let spec = TaskSpec::new(TaskId::parse(&ep.task_id)?).with_step_limit(cfg.step_limit);
            let emb = Embodiment::preset(&ep.embodiment_id)?;
            if !replay_matches(&spec, &emb, &ep) {
                return Err(Error::Assertion(format!("{} does not replay", episode.display())));
            }
            println!("{}: replay matches ({} frames)", episode.display(), ep.len());
        }
    }
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
