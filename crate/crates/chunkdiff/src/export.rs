//! Latent export: one CSV row per training chunk.
//!
//! Header: `z0,z1,...,z{d_z-1},task_id,embodiment_id,skill`. Coordinates are
//! posterior means; `skill` is the scripted-skill label of the chunk's first frame.

use std::path::Path;

use chunkdiff_core::ata::AtaModel;
use chunkdiff_core::datapipe::SampleRef;
use chunkdiff_core::envsuite::Skill;

use crate::dataset::{DataSuite, Split};
use crate::error::{io_err, Error, Result};

const BATCH: usize = 256;

/// Posterior means for `refs`, in order.
pub fn latent_means(ata: &AtaModel, suite: &DataSuite, refs: &[SampleRef]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(refs.len());
    for part in refs.chunks(BATCH) {
        let (chunks, cond) = suite.batch(part, None);
        let post = ata.encode(&chunks, &cond)?;
        out.extend((0..post.mu.rows).map(|i| post.mu.row(i).to_vec()));
    }
    Ok(out)
}

pub fn skill_label(suite: &DataSuite, r: SampleRef) -> u8 {
    suite.episode(r).skills[r.frame]
}

pub fn skill_name(label: u8) -> &'static str {
    Skill::NAMES.get(label as usize).copied().unwrap_or("unknown")
}

/// Writes every chunk of `suite` and returns the number of rows.
pub fn export_latents(ata: &AtaModel, suite: &DataSuite, path: &Path) -> Result<usize> {
    let refs: Vec<SampleRef> = suite.refs(Split::All).into_iter().flatten().collect();
    let means = latent_means(ata, suite, &refs)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = ata.shape().d_z;
    let mut header: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
    header.extend(["task_id", "embodiment_id", "skill"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (r, mu) in refs.iter().zip(&means) {
        let ep = suite.episode(*r);
        let mut row: Vec<String> = mu.iter().map(|v| format!("{v:e}")).collect();
        row.push(ep.task_id.clone());
        row.push(suite.datasets[r.dataset].embodiment_id.clone());
        row.push(skill_name(skill_label(suite, *r)).into());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(refs.len())
}
