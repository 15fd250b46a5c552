use std::collections::{BTreeMap, BTreeSet};

use chunkdiff_core::datapipe::{
    chunk_actions, compute_action_stats, dim_mask, filter_manifests, select_view_index, split_episodes, EpisodeManifest,
    QualityFlag, SampleRef, TrainingStream,
};
use chunkdiff_core::rng::seeded_rng;
use proptest::prelude::*;

fn flag_strategy() -> impl Strategy<Value = BTreeSet<QualityFlag>> {
    proptest::collection::btree_set(
        prop_oneof![
            Just(QualityFlag::Navigation),
            Just(QualityFlag::Bimanual),
            Just(QualityFlag::AmbiguousActions),
            Just(QualityFlag::ErraticControl),
        ],
        0..3,
    )
}

fn manifest(i: usize, flags: BTreeSet<QualityFlag>) -> EpisodeManifest {
    EpisodeManifest {
        dataset_id: format!("d{i}"),
        embodiment_id: "e".into(),
        native_action_dim: 2,
        quality_flags: flags,
        episodes: Vec::new(),
    }
}

proptest! {
    #[test]
    fn normalize_round_trip_is_clip(
        rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..60),
        probe in proptest::collection::vec(-8.0f64..8.0, 3),
        q in 0.0f64..0.2,
    ) {
        let stats = compute_action_stats("d", rows.iter().map(Vec::as_slice), q).unwrap();
        let norm = stats.normalize(&probe);
        prop_assert!(norm.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = stats.denormalize(&norm);
        for i in 0..3 {
            if stats.high[i] > stats.low[i] {
                let clipped = probe[i].clamp(stats.low[i], stats.high[i]);
                prop_assert!((back[i] - clipped).abs() < 1e-6, "dim {i}: {} vs {clipped}", back[i]);
            }
        }
    }

    #[test]
    fn one_chunk_per_frame_with_padding_past_the_end(len in 1usize..80, h in 1usize..33, native in 1usize..5) {
        let actions: Vec<Vec<f64>> = (0..len).map(|i| vec![i as f64; native + 1]).collect();
        let chunks = chunk_actions(&actions, h, &dim_mask(native, native + 1));
        prop_assert_eq!(chunks.len(), len);
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.real_steps(), (len - i).min(h));
            for k in 0..h {
                prop_assert_eq!(c.pad_mask[k], i + k < len);
                prop_assert_eq!(c.step(k)[0], (i + k).min(len - 1) as f64);
            }
        }
    }

    #[test]
    fn split_is_a_partition(n in 0usize..300, frac in 0.0f64..0.5, seed in any::<u64>()) {
        let (train, val) = split_episodes(n, frac, seed, "d");
        let all: BTreeSet<usize> = train.iter().chain(&val).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert_eq!(split_episodes(n, frac, seed, "d"), (train, val));
    }

    #[test]
    fn filtering_is_idempotent(flags in proptest::collection::vec(flag_strategy(), 0..8)) {
        let ms: Vec<EpisodeManifest> = flags.into_iter().enumerate().map(|(i, f)| manifest(i, f)).collect();
        let (once, _) = filter_manifests(ms);
        let (twice, report) = filter_manifests(once.clone());
        prop_assert_eq!(once, twice);
        prop_assert!(report.excluded.is_empty());
    }
}

#[test]
fn hundred_episodes_split_ninety_five_five() {
    let (train, val) = split_episodes(100, 0.05, 7, "d");
    assert_eq!((train.len(), val.len()), (95, 5));
}

#[test]
fn quantiles_of_a_uniform_grid() {
    let rows: Vec<Vec<f64>> = (0..=1000).map(|i| vec![i as f64 / 1000.0, 1.0 - i as f64 / 1000.0]).collect();
    // sort-and-index: position q·(n−1) = 10 lands exactly on the 11th value
    let mut sorted: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    sorted.sort_by(f64::total_cmp);
    let stats = compute_action_stats("d", rows.iter().map(Vec::as_slice), 0.01).unwrap();
    for d in 0..2 {
        assert!((stats.low[d] - sorted[10]).abs() < 1e-12 && (stats.low[d] - 0.01).abs() < 1e-12);
        assert!((stats.high[d] - sorted[990]).abs() < 1e-12 && (stats.high[d] - 0.99).abs() < 1e-12);
    }
    let stats = compute_action_stats("d", rows.iter().map(Vec::as_slice), 0.0).unwrap();
    assert_eq!((stats.low[0], stats.high[0]), (0.0, 1.0));
}

#[test]
fn training_views_are_uniform() {
    const DRAWS: usize = 30_000;
    let ids: Vec<String> = ["wrist", "front", "top"].iter().map(|s| s.to_string()).collect();
    let mut rng = seeded_rng(3, "views");
    let mut counts = [0usize; 3];
    for _ in 0..DRAWS {
        counts[select_view_index(&ids, Some(&mut rng))] += 1;
    }
    let p = 1.0 / 3.0;
    let sd = (DRAWS as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - DRAWS as f64 * p).abs() < 3.0 * sd, "{counts:?}");
    }
    let single = vec!["front".to_string()];
    assert!((0..100).all(|_| select_view_index(&single, Some(&mut rng)) == 0));
}

#[test]
fn stream_draws_follow_the_mixture() {
    let refs = |d: usize, n: usize| (0..n).map(|f| SampleRef { dataset: d, episode: 0, frame: f }).collect::<Vec<_>>();
    let ids = vec!["a".to_string(), "b".to_string()];
    let only_a = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 0.0)]);
    let mut s = TrainingStream::new(&ids, vec![refs(0, 10), refs(1, 10)], &only_a, 32, seeded_rng(0, "s")).unwrap();
    assert!((0..20).flat_map(|_| s.next_batch()).all(|r| r.dataset == 0));
    let weighted = BTreeMap::from([("a".to_string(), 3.0), ("b".to_string(), 1.0)]);
    let mut s = TrainingStream::new(&ids, vec![refs(0, 10), refs(1, 50)], &weighted, 100, seeded_rng(1, "s")).unwrap();
    let n = 200;
    let a = (0..n).flat_map(|_| s.next_batch()).filter(|r| r.dataset == 0).count() as f64;
    let total = (n * 100) as f64;
    let sd = (total * 0.75 * 0.25).sqrt();
    assert!((a - 0.75 * total).abs() < 4.0 * sd, "{a} of {total}");
    assert_eq!(s.steps_per_epoch(), 1);
}
