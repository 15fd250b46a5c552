use std::fs;
use std::path::Path;

use chunkdiff::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use chunkdiff::datagen::build_downstream;
use chunkdiff::formats::{decode_episode, encode_episode, read_manifest, validate_manifest, write_manifest};
use chunkdiff::runfile::{config_diff, config_hash, config_to_string, load_config, parse_config, save_config};
use chunkdiff::Error;
use chunkdiff_core::ata::{AtaModel, AtaShape};
use chunkdiff_core::config::RunConfig;
use chunkdiff_core::envsuite::{scripted_demo, Embodiment, TaskId, TaskSpec};
use proptest::prelude::*;

fn small_config() -> RunConfig {
    RunConfig { d_model: 16, d_z: 8, n_heads: 2, ff_dim: 32, horizon: 4, ..RunConfig::default() }
}

fn ata_checkpoint(cfg: &RunConfig) -> Checkpoint {
    let model = AtaModel::new(AtaShape::from_config(cfg, 12), cfg.seed);
    let mut c = Checkpoint::new("ata", cfg, 42, &model.params, &model.arch);
    c.set_aux_json("note", &vec![1.5f64, -2.0]);
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_round_trip_through_toml(
        seed in 0..=i64::MAX as u64,
        h in 1usize..64,
        lr in 1e-6f64..1e-2,
        w in 0.0f64..1.0,
        steps in 1usize..2000,
        weight in 0.0f64..5.0,
    ) {
        let mut cfg = RunConfig { seed, horizon: h, lr_peak: lr, kl_weight: w, diffusion_steps: steps, sampler_steps: steps, ..RunConfig::default() };
        cfg.mixture.insert("downstream_arm7".into(), weight);
        let back = parse_config(&config_to_string(&cfg), Path::new("p.toml")).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(config_hash(&back), config_hash(&cfg));
    }
}

#[test]
fn config_files_round_trip_and_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let cfg = small_config();
    save_config(&cfg, &path).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);

    fs::write(&path, "seed = 3\nhorizon_len = 8\n").unwrap();
    let err = load_config(&path).unwrap_err().to_string();
    assert!(err.contains("horizon_len"), "{err}");

    fs::write(&path, "h = 0\n").unwrap();
    assert!(load_config(&path).is_err());
    let huge = RunConfig { seed: u64::MAX, ..RunConfig::default() };
    assert!(huge.validate().is_err());
}

#[test]
fn config_diff_names_changed_keys() {
    let a = RunConfig::default();
    let b = RunConfig { seed: 9, kl_weight: 0.5, ..a.clone() };
    let mut d = config_diff(&a, &b);
    d.sort();
    assert_eq!(d, vec!["seed".to_string(), "w".to_string()]);
    assert!(config_diff(&a, &a).is_empty());
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let cfg = small_config();
    let c = ata_checkpoint(&cfg);
    let loaded = decode_checkpoint(&encode_checkpoint(&c), Path::new("c"), Some(&cfg)).unwrap();
    assert_eq!(loaded.checkpoint, c);
    assert!(loaded.warnings.is_empty());
    assert_eq!(loaded.checkpoint.params.checksum(), c.params.checksum());
    assert_eq!(loaded.checkpoint.aux_json::<Vec<f64>>("note").unwrap(), vec![1.5, -2.0]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/ata.ckpt");
    let receipt = save_checkpoint(&c, &path).unwrap();
    assert_eq!(receipt.bytes as u64, fs::metadata(&path).unwrap().len());
    assert_eq!(load_checkpoint(&path, None).unwrap().checkpoint, c);
}

#[test]
fn checkpoint_from_another_config_loads_with_a_warning() {
    let cfg = small_config();
    let c = ata_checkpoint(&cfg);
    let other = RunConfig { seed: 1, ..cfg };
    let loaded = decode_checkpoint(&encode_checkpoint(&c), Path::new("c"), Some(&other)).unwrap();
    assert_eq!(loaded.warnings.len(), 1);
    assert!(loaded.warnings[0].contains("differs"));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let c = ata_checkpoint(&small_config());
    let bytes = encode_checkpoint(&c);
    for at in [0, 5, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(decode_checkpoint(&bad, Path::new("c"), None).is_err(), "flip at {at}");
    }
    let err = decode_checkpoint(&bytes[..bytes.len() - 9], Path::new("c"), None).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long, Path::new("c"), None).is_err());
}

#[test]
fn episodes_round_trip_and_detect_corruption() {
    let emb = Embodiment::preset("arm7").unwrap();
    for task in TaskId::ALL {
        let ep = scripted_demo(&TaskSpec::new(task), &emb, 5).unwrap();
        let bytes = encode_episode(&ep);
        assert_eq!(decode_episode(&bytes, Path::new("e")).unwrap(), ep);
        let mut bad = bytes.clone();
        let mid = bad.len() / 3;
        bad[mid] ^= 1;
        assert!(decode_episode(&bad, Path::new("e")).is_err());
        assert!(decode_episode(&bytes[..bytes.len() - 1], Path::new("e")).is_err());
    }
}

#[test]
fn manifest_validation_reports_missing_and_mismatched_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let path = build_downstream(dir.path(), "arm7", &[TaskId::Reach, TaskId::Press], 2, 0, 120).unwrap();
    let mut m = read_manifest(&path).unwrap();
    assert_eq!(m.episodes.len(), 4);
    assert!(validate_manifest(&m, &path).unwrap().is_empty());

    let gone = m.episodes[0].path.clone();
    fs::remove_file(path.parent().unwrap().join(&gone)).unwrap();
    m.episodes[1].length += 1;
    write_manifest(&m, &path).unwrap();
    let m = read_manifest(&path).unwrap();
    let problems = validate_manifest(&m, &path).unwrap();
    assert_eq!(problems.len(), 2, "{problems:?}");
    assert!(problems.iter().any(|p| p.contains(&gone)));
    assert!(problems.iter().any(|p| p.contains("manifest length")));
}
