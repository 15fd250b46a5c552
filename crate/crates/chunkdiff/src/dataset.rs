//! Prepared training data: episodes with cached frozen-encoder features,
//! normalized canonical-width actions, and train/validation splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chunkdiff_core::config::RunConfig;
use chunkdiff_core::datapipe::{
    center_crop, chunk_at, compute_action_stats, dim_mask, filter_manifests, pad_to, select_view_index, split_episodes,
    ActionStats, Episode, EpisodeManifest, FilterReport, SampleRef, TrainingStream,
};
use chunkdiff_core::encoders::{ConditionBatch, ProprioBatch};
use chunkdiff_core::policy::FrozenEncoders;
use chunkdiff_core::rng::{seeded_rng, RngStream};
use chunkdiff_core::tensor::Tensor;
use chunkdiff_core::types::ActionChunk;

use crate::error::Result;
use crate::formats::{episode_path, read_episode, read_manifest};

#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub task_id: String,
    pub instruction: String,
    pub seed: u64,
    pub text: Vec<f64>,
    pub view_ids: Vec<String>,
    /// Image features per `[view][frame]`, stored in single precision.
    pub features: Vec<Vec<Vec<f32>>>,
    /// Canonical-width proprioception per frame.
    pub proprio: Vec<Vec<f64>>,
    /// Normalized canonical-width actions per frame.
    pub actions: Vec<Vec<f64>>,
    pub skills: Vec<u8>,
}

impl PreparedEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub id: String,
    pub embodiment_id: String,
    pub native_action_dim: usize,
    pub stats: ActionStats,
    pub dims: Vec<bool>,
    pub episodes: Vec<PreparedEpisode>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Normalizes and featurizes one dataset. Statistics come from its training split only.
pub fn prepare_dataset(id: &str, episodes: &[Episode], cfg: &RunConfig, enc: &FrozenEncoders) -> Result<PreparedDataset> {
    let first = episodes.first().ok_or_else(|| chunkdiff_core::datapipe::DataError::EmptyDataset(id.into()))?;
    let native = first.actions.first().map_or(0, Vec::len);
    let (train, val) = split_episodes(episodes.len(), cfg.val_fraction, cfg.seed, id);
    let stats =
        compute_action_stats(id, train.iter().flat_map(|&i| episodes[i].actions.iter().map(Vec::as_slice)), cfg.clip_quantile)?;
    let text_cache: BTreeMap<&str, Vec<f64>> =
        episodes.iter().map(|e| Ok((e.instruction.as_str(), enc.text.encode(&e.instruction)?))).collect::<Result<_>>()?;
    let crop = enc.image.input_size();
    let mut out = Vec::with_capacity(episodes.len());
    for e in episodes {
        let features = e
            .images
            .iter()
            .map(|frames| {
                frames
                    .iter()
                    .map(|img| {
                        let f = enc.image.encode(&center_crop(img, crop)?)?;
                        Ok(f.into_iter().map(|x| x as f32).collect())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(PreparedEpisode {
            task_id: e.task_id.clone(),
            instruction: e.instruction.clone(),
            seed: e.seed,
            text: text_cache[e.instruction.as_str()].clone(),
            view_ids: e.view_ids.clone(),
            features,
            proprio: e.proprio.iter().map(|p| pad_to(p, cfg.proprio_dim)).collect::<Result<_, _>>()?,
            actions: e.actions.iter().map(|a| pad_to(&stats.normalize(a), cfg.action_dim)).collect::<Result<_, _>>()?,
            skills: e.skills.clone(),
        });
    }
    Ok(PreparedDataset {
        id: id.into(),
        embodiment_id: first.embodiment_id.clone(),
        native_action_dim: native,
        dims: dim_mask(native, cfg.action_dim),
        stats,
        episodes: out,
        train,
        val,
    })
}

/// Which split to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

/// Every dataset of one training phase.
#[derive(Debug, Clone)]
pub struct DataSuite {
    pub datasets: Vec<PreparedDataset>,
    pub horizon: usize,
    /// Fine-tuning keeps proprioception; pre-training drops it.
    pub with_proprio: bool,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub proprio_dim: usize,
}

impl DataSuite {
    pub fn new(datasets: Vec<PreparedDataset>, cfg: &RunConfig, enc: &FrozenEncoders, with_proprio: bool) -> Self {
        Self {
            datasets,
            horizon: cfg.horizon,
            with_proprio,
            feature_dim: enc.image.feature_dim(),
            text_dim: enc.text.dim(),
            proprio_dim: cfg.proprio_dim,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.id.clone()).collect()
    }

    /// Statistics keyed by embodiment; the first dataset of each embodiment wins.
    pub fn stats_by_embodiment(&self) -> BTreeMap<String, ActionStats> {
        let mut m = BTreeMap::new();
        for d in &self.datasets {
            m.entry(d.embodiment_id.clone()).or_insert_with(|| d.stats.clone());
        }
        m
    }

    pub fn episode(&self, r: SampleRef) -> &PreparedEpisode {
        &self.datasets[r.dataset].episodes[r.episode]
    }

    /// Sample addresses per dataset, one per frame.
    pub fn refs(&self, split: Split) -> Vec<Vec<SampleRef>> {
        self.datasets
            .iter()
            .enumerate()
            .map(|(d, ds)| {
                let eps: Vec<usize> = match split {
                    Split::Train => ds.train.clone(),
                    Split::Val => ds.val.clone(),
                    Split::All => (0..ds.episodes.len()).collect(),
                };
                eps.into_iter()
                    .flat_map(|e| (0..ds.episodes[e].len()).map(move |frame| SampleRef { dataset: d, episode: e, frame }))
                    .collect()
            })
            .collect()
    }

    /// Up to `max` validation samples spread evenly over the split.
    pub fn val_sample(&self, max: usize) -> Vec<SampleRef> {
        let all: Vec<SampleRef> = self.refs(Split::Val).into_iter().flatten().collect();
        if all.len() <= max {
            return all;
        }
        (0..max).map(|i| all[i * all.len() / max]).collect()
    }

    pub fn stream(&self, cfg: &RunConfig, label: &str) -> Result<TrainingStream> {
        Ok(TrainingStream::new(
            &self.ids(),
            self.refs(Split::Train),
            &cfg.mixture,
            cfg.batch_size,
            seeded_rng(cfg.seed, &format!("stream/{label}")),
        )?)
    }

    pub fn chunk(&self, r: SampleRef) -> ActionChunk {
        let ds = &self.datasets[r.dataset];
        chunk_at(&ds.episodes[r.episode].actions, r.frame, self.horizon, &ds.dims)
    }

    /// Chunks and conditions for `refs`. Views are drawn from `view_rng` in
    /// training and fixed to the lexicographically first id otherwise.
    pub fn batch(&self, refs: &[SampleRef], mut view_rng: Option<&mut RngStream>) -> (Vec<ActionChunk>, ConditionBatch) {
        let n = refs.len();
        let mut features = Tensor::zeros(n, self.feature_dim);
        let mut text = Tensor::zeros(n, self.text_dim);
        let mut proprio = Vec::with_capacity(n);
        let mut chunks = Vec::with_capacity(n);
        for (i, &r) in refs.iter().enumerate() {
            let ep = self.episode(r);
            let v = select_view_index(&ep.view_ids, view_rng.as_deref_mut());
            for (dst, src) in features.row_mut(i).iter_mut().zip(&ep.features[v][r.frame]) {
                *dst = *src as f64;
            }
            text.row_mut(i).copy_from_slice(&ep.text);
            proprio.push(self.with_proprio.then(|| ep.proprio[r.frame].as_slice()));
            chunks.push(self.chunk(r));
        }
        let proprio = ProprioBatch::new(&proprio, self.proprio_dim).expect("proprio padded to canonical width");
        (chunks, ConditionBatch { features, proprio, text })
    }
}

type LoadedDatasets = Vec<(EpisodeManifest, Vec<Episode>)>;

/// Reads manifests, drops flagged datasets, and loads every remaining episode.
pub fn load_manifests(paths: &[PathBuf]) -> Result<(LoadedDatasets, FilterReport)> {
    let mut manifests = Vec::with_capacity(paths.len());
    for p in paths {
        manifests.push((read_manifest(p)?, p.clone()));
    }
    let where_from: BTreeMap<String, PathBuf> = manifests.iter().map(|(m, p)| (m.dataset_id.clone(), p.clone())).collect();
    let (kept, report) = filter_manifests(manifests.into_iter().map(|(m, _)| m).collect());
    let mut out = Vec::with_capacity(kept.len());
    for m in kept {
        let base = &where_from[&m.dataset_id];
        let eps = m.episodes.iter().map(|e| read_episode(&episode_path(base, &e.path))).collect::<Result<Vec<_>>>()?;
        out.push((m, eps));
    }
    Ok((out, report))
}

pub fn load_suite(
    paths: &[PathBuf],
    cfg: &RunConfig,
    enc: &FrozenEncoders,
    with_proprio: bool,
) -> Result<(DataSuite, FilterReport)> {
    let (loaded, report) = load_manifests(paths)?;
    let datasets = loaded.iter().map(|(m, eps)| prepare_dataset(&m.dataset_id, eps, cfg, enc)).collect::<Result<Vec<_>>>()?;
    Ok((DataSuite::new(datasets, cfg, enc, with_proprio), report))
}

/// `manifest.toml` files directly under each subdirectory of `root`, sorted.
pub fn find_manifests(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if root.join("manifest.toml").is_file() {
        out.push(root.join("manifest.toml"));
    }
    let entries = std::fs::read_dir(root).map_err(crate::error::io_err(root))?;
    for e in entries {
        let p = e.map_err(crate::error::io_err(root))?.path().join("manifest.toml");
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
