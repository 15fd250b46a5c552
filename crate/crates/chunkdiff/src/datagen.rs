//! Scripted-demonstration datasets written in the canonical episode format.
//!
//! ```text
//! <root>/pretrain/pretrain_<embodiment>/manifest.toml
//! <root>/pretrain/pretrain_<embodiment>/episodes/<task>_<i>.cdep
//! <root>/downstream/downstream_<embodiment>/...
//! ```

use std::path::{Path, PathBuf};

use chunkdiff_core::datapipe::{EpisodeEntry, EpisodeManifest};
use chunkdiff_core::envsuite::{scripted_demo, Embodiment, TaskId, TaskSpec};
use chunkdiff_core::rng::seeded_rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::formats::{write_episode, write_manifest};

pub const PRETRAIN_DIR: &str = "pretrain";
pub const DOWNSTREAM_DIR: &str = "downstream";

/// Base reset seed for demonstrations of one (phase, embodiment, task) cell.
pub fn demo_seed_base(seed: u64, phase: &str, embodiment: &str, task: TaskId) -> u64 {
    seeded_rng(seed, &format!("demo/{phase}/{embodiment}/{}", task.as_str())).next_u64()
}

/// Writes one dataset of `per_task` demonstrations per task and returns its manifest path.
pub fn generate_dataset(
    dir: &Path,
    dataset_id: &str,
    phase: &str,
    emb: &Embodiment,
    tasks: &[TaskId],
    per_task: usize,
    seed: u64,
    step_limit: usize,
) -> Result<PathBuf> {
    let mut manifest = EpisodeManifest {
        dataset_id: dataset_id.into(),
        embodiment_id: emb.id.clone(),
        native_action_dim: emb.action_dim,
        quality_flags: Default::default(),
        episodes: Vec::with_capacity(tasks.len() * per_task),
    };
    for &task in tasks {
        let spec = TaskSpec::new(task).with_step_limit(step_limit);
        let base = demo_seed_base(seed, phase, &emb.id, task);
        for i in 0..per_task {
            let ep = scripted_demo(&spec, emb, base.wrapping_add(i as u64))?;
            let rel = format!("episodes/{}_{i:05}.cdep", task.as_str());
            write_episode(&ep, &dir.join(&rel))?;
            manifest.episodes.push(EpisodeEntry {
                path: rel,
                length: ep.len(),
                task_id: ep.task_id.clone(),
                instruction: ep.instruction.clone(),
                view_ids: ep.view_ids.clone(),
            });
        }
    }
    let path = dir.join("manifest.toml");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

/// One dataset per embodiment over every task, for cross-embodiment pre-training.
pub fn build_pretrain_mixture(
    root: &Path,
    n_embodiments: usize,
    tasks: &[TaskId],
    per_cell: usize,
    seed: u64,
    step_limit: usize,
) -> Result<Vec<PathBuf>> {
    let presets = Embodiment::presets();
    if n_embodiments < 2 || n_embodiments > presets.len() {
        return Err(Error::Assertion(format!(
            "pre-training mixture needs between 2 and {} embodiments, got {n_embodiments}",
            presets.len()
        )));
    }
    presets[..n_embodiments]
        .iter()
        .map(|emb| {
            let id = format!("{PRETRAIN_DIR}_{}", emb.id);
            generate_dataset(&root.join(PRETRAIN_DIR).join(&id), &id, PRETRAIN_DIR, emb, tasks, per_cell, seed, step_limit)
        })
        .collect()
}

/// The downstream suite: one embodiment, every task.
pub fn build_downstream(
    root: &Path,
    embodiment: &str,
    tasks: &[TaskId],
    per_task: usize,
    seed: u64,
    step_limit: usize,
) -> Result<PathBuf> {
    let emb = Embodiment::preset(embodiment)?;
    let id = format!("{DOWNSTREAM_DIR}_{}", emb.id);
    generate_dataset(&root.join(DOWNSTREAM_DIR).join(&id), &id, DOWNSTREAM_DIR, &emb, tasks, per_task, seed, step_limit)
}
