//! Dataset filtering, action normalization, chunking and batching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded_rng, RngStream};
use crate::types::{ActionChunk, Image, ObservationFrame};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("dataset `{0}` has no actions")]
    EmptyDataset(String),
    #[error("clip quantile {0} outside [0, 0.5)")]
    Quantile(f64),
    #[error("crop size {size} exceeds image {height}x{width}")]
    Crop { size: usize, height: usize, width: usize },
    #[error("mixture names unknown dataset `{0}`")]
    UnknownMixtureKey(String),
    #[error("action width {got} exceeds canonical width {canonical}")]
    ActionWidth { got: usize, canonical: usize },
    #[error("no training samples")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    Navigation,
    Bimanual,
    AmbiguousActions,
    ErraticControl,
}

impl QualityFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityFlag::Navigation => "navigation",
            QualityFlag::Bimanual => "bimanual",
            QualityFlag::AmbiguousActions => "ambiguous_actions",
            QualityFlag::ErraticControl => "erratic_control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub path: String,
    pub length: usize,
    pub task_id: String,
    pub instruction: String,
    pub view_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub dataset_id: String,
    pub embodiment_id: String,
    pub native_action_dim: usize,
    #[serde(default)]
    pub quality_flags: BTreeSet<QualityFlag>,
    #[serde(default)]
    pub episodes: Vec<EpisodeEntry>,
}

/// One frame-aligned demonstration: observation `i` precedes action `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: String,
    pub embodiment_id: String,
    pub instruction: String,
    pub seed: u64,
    pub view_ids: Vec<String>,
    /// `images[view][frame]`.
    pub images: Vec<Vec<Arc<Image>>>,
    /// Native-width robot state per frame.
    pub proprio: Vec<Vec<f64>>,
    /// Native-width actions per frame.
    pub actions: Vec<Vec<f64>>,
    /// Scripted-skill label per frame.
    pub skills: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, i: usize, with_proprio: bool) -> ObservationFrame {
        ObservationFrame {
            images: self.view_ids.iter().cloned().zip(self.images.iter().map(|v| v[i].clone())).collect(),
            proprio: with_proprio.then(|| self.proprio[i].clone()),
            embodiment_id: self.embodiment_id.clone(),
            task_instruction: self.instruction.clone(),
        }
    }
}

/// Why each excluded dataset was dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub excluded: Vec<(String, String)>,
}

/// Drops navigation / bimanual datasets, then those with ambiguous or erratic actions.
pub fn filter_manifests(manifests: Vec<EpisodeManifest>) -> (Vec<EpisodeManifest>, FilterReport) {
    let rules: [(&[QualityFlag], &str); 2] = [
        (&[QualityFlag::Navigation, QualityFlag::Bimanual], "irrelevant embodiment"),
        (&[QualityFlag::AmbiguousActions, QualityFlag::ErraticControl], "unusable actions"),
    ];
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(manifests.len());
    'outer: for m in manifests {
        for (flags, why) in rules {
            if let Some(f) = flags.iter().find(|f| m.quality_flags.contains(f)) {
                report.excluded.push((m.dataset_id.clone(), alloc::format!("{why}: {}", f.as_str())));
                continue 'outer;
            }
        }
        kept.push(m);
    }
    (kept, report)
}

/// Per-dimension clipping and rescaling parameters for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub dataset_id: String,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else if frac == 0.0 {
        sorted[i]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

pub fn compute_action_stats<'a>(
    dataset_id: &str,
    actions: impl IntoIterator<Item = &'a [f64]>,
    q: f64,
) -> Result<ActionStats, DataError> {
    if !(0.0..0.5).contains(&q) {
        return Err(DataError::Quantile(q));
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for a in actions {
        if cols.is_empty() {
            cols = vec![Vec::new(); a.len()];
        }
        for (c, v) in cols.iter_mut().zip(a) {
            c.push(*v);
        }
    }
    if cols.is_empty() || cols[0].is_empty() {
        return Err(DataError::EmptyDataset(dataset_id.to_string()));
    }
    let mut stats =
        ActionStats { dataset_id: dataset_id.to_string(), low: Vec::new(), high: Vec::new(), min: Vec::new(), max: Vec::new() };
    for mut c in cols {
        c.sort_by(|a, b| a.total_cmp(b));
        let lo = quantile_sorted(&c, q);
        let hi = quantile_sorted(&c, 1.0 - q);
        // after clipping to [lo, hi] the extremes are exactly the quantiles
        stats.low.push(lo);
        stats.high.push(hi);
        stats.min.push(c[0].clamp(lo, hi));
        stats.max.push(c[c.len() - 1].clamp(lo, hi));
    }
    Ok(stats)
}

impl ActionStats {
    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Clip to `[low, high]`, then map `[min, max]` affinely onto `[-1, 1]`; constant dimensions map to 0.
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = x.clamp(self.low[i], self.high[i]);
                let span = self.max[i] - self.min[i];
                if span > 0.0 {
                    (2.0 * (c - self.min[i]) / span - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Inverse of the affine part of [`normalize`](Self::normalize); clipped values stay clipped.
    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .enumerate()
            .map(|(i, &y)| {
                let span = self.max[i] - self.min[i];
                if span > 0.0 {
                    self.min[i] + (y + 1.0) * 0.5 * span
                } else {
                    self.min[i]
                }
            })
            .collect()
    }
}

/// Zero-pads a native vector to the canonical width.
pub fn pad_to(native: &[f64], canonical: usize) -> Result<Vec<f64>, DataError> {
    if native.len() > canonical {
        return Err(DataError::ActionWidth { got: native.len(), canonical });
    }
    let mut v = native.to_vec();
    v.resize(canonical, 0.0);
    Ok(v)
}

pub fn dim_mask(native: usize, canonical: usize) -> Vec<bool> {
    (0..canonical).map(|i| i < native).collect()
}

/// The chunk starting at frame `i`, tail-padded by repeating the last real action.
pub fn chunk_at(actions: &[Vec<f64>], i: usize, horizon: usize, dims: &[bool]) -> ActionChunk {
    let n = actions.len();
    let d = dims.len();
    let mut values = Vec::with_capacity(horizon * d);
    let mut pad = Vec::with_capacity(horizon);
    for k in 0..horizon {
        values.extend_from_slice(&actions[(i + k).min(n - 1)]);
        pad.push(i + k < n);
    }
    ActionChunk::new(values, horizon, d, pad, dims.to_vec()).expect("chunk shape")
}

/// One chunk per frame (stride 1).
pub fn chunk_actions(actions: &[Vec<f64>], horizon: usize, dims: &[bool]) -> Vec<ActionChunk> {
    (0..actions.len()).map(|i| chunk_at(actions, i, horizon, dims)).collect()
}

/// `(frame, chunk)` pairs for an episode whose actions are already normalized.
pub fn chunk_episode(
    episode: &Episode,
    normalized: &[Vec<f64>],
    horizon: usize,
    dims: &[bool],
    with_proprio: bool,
) -> Vec<(ObservationFrame, ActionChunk)> {
    chunk_actions(normalized, horizon, dims).into_iter().enumerate().map(|(i, c)| (episode.frame(i, with_proprio), c)).collect()
}

/// Index of the view to use: uniform at training time (`Some(rng)`), else the
/// lexicographically first id.
pub fn select_view_index(view_ids: &[String], rng: Option<&mut RngStream>) -> usize {
    assert!(!view_ids.is_empty(), "frame without views");
    match rng {
        Some(r) => r.random_range(0..view_ids.len()),
        None => {
            let mut best = 0;
            for (i, v) in view_ids.iter().enumerate() {
                if v < &view_ids[best] {
                    best = i;
                }
            }
            best
        }
    }
}

pub fn select_view<'a>(frame: &'a ObservationFrame, rng: Option<&mut RngStream>) -> &'a Arc<Image> {
    let ids: Vec<String> = frame.images.iter().map(|(v, _)| v.clone()).collect();
    &frame.images[select_view_index(&ids, rng)].1
}

/// The centered `size × size` window, copied without resampling.
pub fn center_crop(image: &Image, size: usize) -> Result<Image, DataError> {
    if size > image.height || size > image.width {
        return Err(DataError::Crop { size, height: image.height, width: image.width });
    }
    let y0 = (image.height - size) / 2;
    let x0 = (image.width - size) / 2;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in y0..y0 + size {
        let start = (y * image.width + x0) * 3;
        data.extend_from_slice(&image.data[start..start + size * 3]);
    }
    Ok(Image { height: size, width: size, data })
}

/// Episode-level train/validation partition, stable for a given seed.
pub fn split_episodes(n: usize, val_fraction: f64, seed: u64, dataset_id: &str) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed, &alloc::format!("split/{dataset_id}"));
    idx.shuffle(&mut rng);
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// A training sample address: dataset, episode, frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRef {
    pub dataset: usize,
    pub episode: usize,
    pub frame: usize,
}

/// Weighted sampler over datasets, uniform over samples within a dataset.
#[derive(Debug, Clone)]
pub struct TrainingStream {
    samples: Vec<Vec<SampleRef>>,
    cumulative: Vec<f64>,
    batch_size: usize,
    rng: RngStream,
}

impl TrainingStream {
    /// `samples[d]` are the training samples of dataset `d`, named `ids[d]`.
    pub fn new(
        ids: &[String],
        samples: Vec<Vec<SampleRef>>,
        mixture: &BTreeMap<String, f64>,
        batch_size: usize,
        rng: RngStream,
    ) -> Result<Self, DataError> {
        for k in mixture.keys() {
            if !ids.contains(k) {
                return Err(DataError::UnknownMixtureKey(k.clone()));
            }
        }
        let mut cumulative = Vec::with_capacity(ids.len());
        let mut acc = 0.0;
        for (id, s) in ids.iter().zip(&samples) {
            if !s.is_empty() {
                acc += mixture.get(id).copied().unwrap_or(1.0);
            }
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(DataError::NoSamples);
        }
        Ok(Self { samples, cumulative, batch_size, rng })
    }

    pub fn total_samples(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    /// Optimizer steps that make one pass worth of samples.
    pub fn steps_per_epoch(&self) -> usize {
        self.total_samples().div_ceil(self.batch_size).max(1)
    }

    pub fn rng(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn next_batch(&mut self) -> Vec<SampleRef> {
        let total = *self.cumulative.last().unwrap();
        (0..self.batch_size)
            .map(|_| {
                let u = self.rng.random::<f64>() * total;
                let d = self.cumulative.iter().position(|c| u < *c).unwrap_or(self.cumulative.len() - 1);
                let d = (0..=d).rev().find(|&i| !self.samples[i].is_empty()).unwrap_or(d);
                let s = &self.samples[d];
                s[self.rng.random_range(0..s.len())]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(id: &str, flags: &[QualityFlag]) -> EpisodeManifest {
        EpisodeManifest {
            dataset_id: id.into(),
            embodiment_id: "e".into(),
            native_action_dim: 2,
            quality_flags: flags.iter().copied().collect(),
            episodes: Vec::new(),
        }
    }

    #[test]
    fn filter_names_excluded_and_keeps_order() {
        let ms = vec![manifest("a", &[]), manifest("b", &[QualityFlag::Bimanual]), manifest("c", &[]), manifest("d", &[])];
        let (kept, report) = filter_manifests(ms);
        assert_eq!(kept.iter().map(|m| m.dataset_id.as_str()).collect::<Vec<_>>(), ["a", "c", "d"]);
        assert_eq!(report.excluded.len(), 1);
        assert_eq!(report.excluded[0].0, "b");
        let (again, r2) = filter_manifests(kept.clone());
        assert_eq!(again, kept);
        assert!(r2.excluded.is_empty());
        let (none, _) = filter_manifests(vec![manifest("x", &[QualityFlag::ErraticControl])]);
        assert!(none.is_empty());
    }

    #[test]
    fn stats_degenerate_cases() {
        let rows: Vec<Vec<f64>> = vec![vec![3.0, -1.0], vec![3.0, 5.0], vec![3.0, 2.0]];
        let s = compute_action_stats("d", rows.iter().map(|r| r.as_slice()), 0.0).unwrap();
        assert_eq!((s.low[0], s.high[0]), (3.0, 3.0));
        assert_eq!((s.low[1], s.high[1]), (-1.0, 5.0));
        assert_eq!(s.normalize(&[3.0, -1.0]), vec![0.0, -1.0]);
        assert_eq!(s.normalize(&[3.0, 5.0])[1], 1.0);
        assert_eq!(s.normalize(&[3.0, 2.0])[1], 0.0);
        assert!(compute_action_stats("e", core::iter::empty(), 0.1).is_err());
        assert!(compute_action_stats("d", rows.iter().map(|r| r.as_slice()), 0.5).is_err());
    }

    #[test]
    fn chunk_counts_and_padding() {
        let acts: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let chunks = chunk_actions(&acts, 16, &[true]);
        assert_eq!(chunks.len(), 40);
        assert_eq!(chunks[30].real_steps(), 10);
        assert_eq!(chunks[30].values[15], 39.0);
        let one = chunk_actions(&acts[..1], 16, &[true]);
        assert_eq!((one.len(), one[0].real_steps()), (1, 1));
        let unit = chunk_actions(&acts, 1, &[true]);
        assert!(unit.iter().all(|c| c.real_steps() == 1));
    }

    #[test]
    fn crop_offsets() {
        let mut img = Image::filled(64, 48, [0, 0, 0]);
        for y in 0..64 {
            for x in 0..48 {
                img.set_pixel(y, x, [x as u8, y as u8, 0]);
            }
        }
        let c = center_crop(&img, 48).unwrap();
        assert_eq!(c.pixel(0, 0), [0, 8, 0]);
        assert_eq!(c.pixel(47, 47), [47, 55, 0]);
        assert_eq!(center_crop(&img, 48).unwrap().height, 48);
        assert!(center_crop(&img, 49).is_err());
    }

    #[test]
    fn eval_view_is_lexicographic_first() {
        let ids: Vec<String> = vec!["wrist".into(), "front".into()];
        assert_eq!(select_view_index(&ids, None), 1);
    }

    #[test]
    fn split_is_partition() {
        let (tr, va) = split_episodes(100, 0.05, 3, "x");
        assert_eq!((tr.len(), va.len()), (95, 5));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_episodes(100, 0.05, 3, "x"), (tr, va));
    }

    #[test]
    fn stream_rejects_unknown_mixture_key() {
        let mut m = BTreeMap::new();
        m.insert("ghost".to_string(), 1.0);
        let r = TrainingStream::new(&["a".into()], vec![vec![]], &m, 4, seeded_rng(0, "s"));
        assert!(matches!(r, Err(DataError::UnknownMixtureKey(_))));
    }
}
