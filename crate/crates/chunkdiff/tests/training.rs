use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chunkdiff::ablation::{pretrain_gain, structural_check, variant_config, Variant};
use chunkdiff::datagen::build_downstream;
use chunkdiff::dataset::{DataSuite, Split};
use chunkdiff::evaluate::{evaluate_policy, evaluate_random};
use chunkdiff::export::export_latents;
use chunkdiff::models::assemble_policy;
use chunkdiff::pipeline::{downstream_suite, eval_settings, DOWNSTREAM_EMBODIMENT};
use chunkdiff::rundir::{Logger, RunDir};
use chunkdiff::train::{new_ata, new_lpg, train_ata, train_lpg};
use chunkdiff_core::config::{RunConfig, SamplerKind};
use chunkdiff_core::diffusion::Sampler;
use chunkdiff_core::envsuite::TaskId;
use chunkdiff_core::optim::CosineSchedule;
use chunkdiff_core::policy::Generator;

fn toy_config() -> RunConfig {
    RunConfig {
        horizon: 8,
        d_z: 8,
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        time_embed_dim: 8,
        lpg_layers: 2,
        lr_peak: 1e-3,
        warmup_steps: 20,
        batch_size: 32,
        diffusion_steps: 100,
        sampler: SamplerKind::Ddim,
        sampler_steps: 10,
        step_limit: 120,
        ..RunConfig::default()
    }
}

/// Ten demonstrations: two per task on the downstream robot.
fn toy_suite(root: &Path, cfg: &RunConfig) -> DataSuite {
    let data = root.join("data");
    if !data.exists() {
        build_downstream(&data, DOWNSTREAM_EMBODIMENT, &TaskId::ALL, 2, cfg.seed, cfg.step_limit).unwrap();
    }
    let run = RunDir::create(&root.join("run"), cfg, false).unwrap();
    downstream_suite(cfg, &data, &run).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn warmup_reaches_peak_at_step_thousand() {
    let s = CosineSchedule { peak: 1e-4, warmup: 1000, total: 100_000 };
    assert!((s.lr(500) - 0.5e-4).abs() < 1e-18);
    assert!((s.lr(1000) - 1e-4).abs() < 1e-18);
    assert!(s.lr(1001) < 1e-4 && s.lr(1001) > 0.999e-4);
    assert!(s.lr(100_000).abs() < 1e-18);
    let mut prev = s.lr(1000);
    for step in (1000..=100_000).step_by(997) {
        assert!(s.lr(step) <= prev);
        prev = s.lr(step);
    }
}

#[test]
fn autoencoder_loss_halves_on_a_toy_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let suite = toy_suite(dir.path(), &cfg);
    assert_eq!(suite.datasets[0].episodes.len(), 10);

    let train_eps: BTreeSet<usize> = suite.refs(Split::Train).concat().iter().map(|r| r.episode).collect();
    let val_eps: BTreeSet<usize> = suite.refs(Split::Val).concat().iter().map(|r| r.episode).collect();
    assert!(!val_eps.is_empty() && train_eps.is_disjoint(&val_eps));

    let (_, log) = train_ata(&cfg, &suite, None, 50, "toy/ata", &Logger::silent()).unwrap();
    let (first, last) = (log.first_train_loss(), log.last_train_loss());
    assert!(last <= 0.5 * first, "train loss {first} -> {last}");
    assert_eq!(log.curve.len(), 50);
    assert!(log.curve.iter().all(|c| c.val_loss.is_finite()));
    let best = log.curve.iter().map(|c| c.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(log.best_val, best);
}

#[test]
fn generator_training_leaves_the_autoencoder_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let suite = toy_suite(dir.path(), &cfg);
    let log = Logger::silent();
    let (ata, _) = train_ata(&cfg, &suite, None, 5, "toy/ata", &log).unwrap();
    let before = ata.params.checksum();
    let (net, lg) = train_lpg(&cfg, &suite, &ata, None, 10, "toy/lpg", &log).unwrap();
    assert_eq!(ata.params.checksum(), before);
    // an untrained predictor of unit-variance noise scores about 1 per dimension
    assert!(lg.best_val < 1.0, "validation loss {}", lg.best_val);

    // resuming from existing weights
    let (_, again) = train_lpg(&cfg, &suite, &ata, Some(net), 2, "toy/lpg-resume", &log).unwrap();
    assert!(again.best_val.is_finite());
    assert_eq!(ata.params.checksum(), before);
}

#[test]
fn latent_export_writes_one_row_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let suite = toy_suite(dir.path(), &cfg);
    let ata = new_ata(&cfg, suite.feature_dim);
    let a = dir.path().join("a/latents.csv");
    let b = dir.path().join("b.csv");
    let rows = export_latents(&ata, &suite, &a).unwrap();
    export_latents(&ata, &suite, &b).unwrap();
    let frames: usize = suite.datasets.iter().flat_map(|d| d.episodes.iter().map(|e| e.len())).sum();
    assert_eq!(rows, frames);

    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), cfg.d_z + 3);
    assert_eq!(&header[cfg.d_z..], ["task_id", "embodiment_id", "skill"]);
    assert_eq!(lines.count(), frames);
}

#[test]
fn scripted_datasets_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for root in [&a, &b] {
        build_downstream(root, "arm7", &[TaskId::Push, TaskId::OpenSlider], 2, 4, 120).unwrap();
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() >= 5);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn each_variant_changes_exactly_one_key() {
    let base = RunConfig::default();
    let expected = [
        (Variant::NonDiffusionLpg, "lpg_kind"),
        (Variant::TaskAwareAta, "ata_conditioning"),
        (Variant::ObsAgnosticAta, "ata_conditioning"),
        (Variant::NoPretrain, "use_pretrain"),
    ];
    for (v, key) in expected {
        let (_, delta) = variant_config(&base, v).unwrap();
        assert_eq!(delta, vec![key.to_string()], "{v}");
    }
    assert!(variant_config(&base, Variant::Full).unwrap().1.is_empty());
    assert!(Variant::parse("bogus").is_err());
}

#[test]
fn structural_checks_follow_the_conditioning() {
    let cfg = toy_config();
    for v in [Variant::Full, Variant::TaskAwareAta, Variant::ObsAgnosticAta] {
        let (c, _) = variant_config(&cfg, v).unwrap();
        let s = structural_check(&c, 20).unwrap();
        assert!(s.passed, "{v}: {s:?}");
        let (image, text) = (s.image_grad_norm > 0.0, s.text_grad_norm > 0.0);
        match v {
            Variant::Full => assert!(image && !text),
            Variant::TaskAwareAta => assert!(image && text),
            _ => assert!(!image && !text),
        }
    }
}

#[test]
fn untrained_policy_is_no_better_than_random_actions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let suite = toy_suite(dir.path(), &cfg);
    let policy = assemble_policy(
        &cfg,
        Some(new_ata(&cfg, suite.feature_dim)),
        Generator::LatentDiffusion(new_lpg(&cfg, suite.feature_dim).unwrap()),
        suite.stats_by_embodiment(),
    )
    .unwrap();
    let settings = eval_settings(&cfg, Sampler::Ddim { steps: 10 }).unwrap();
    let log = Logger::silent();
    let untrained = evaluate_policy(&policy, &settings, "untrained", "h", cfg.diffusion_steps, &log).unwrap();
    let random = evaluate_random(&settings, "h", &log).unwrap();
    for t in &untrained.tasks {
        assert_eq!(t.trials, 50);
        let r = random.task(&t.task).unwrap();
        assert!((0.0..=1.0).contains(&t.success_rate));
        assert!(t.success_rate <= r.success_rate + 0.05, "{}: {} vs random {}", t.task, t.success_rate, r.success_rate);
    }

    let gain = pretrain_gain(&random, &random).unwrap();
    assert_eq!(gain.average, 0.0);
    assert!(gain.per_task.iter().all(|(_, d)| *d == 0.0));
    assert_eq!(gain.per_task.len(), TaskId::ALL.len());
}
