//! Episode files and dataset manifests.
//!
//! Episode container body (after the common header, see [`crate::binio`]):
//!
//! ```text
//! seed            u64
//! task_id         str
//! embodiment_id   str
//! instruction     str
//! n_frames        u32
//! action_dim      u32
//! proprio_dim     u32
//! n_views         u32
//! height, width   u32, u32
//! view_ids        n_views × str
//! images          n_views × n_frames × height·width·3 bytes (view-major, RGB)
//! proprio         n_frames × proprio_dim f64
//! actions         n_frames × action_dim f64
//! skills          n_frames × u8
//! ```
//!
//! Manifests are TOML with `dataset_id`, `embodiment_id`, `native_action_dim`,
//! `quality_flags` and an `[[episodes]]` array of `path`, `length`, `task_id`,
//! `instruction`, `view_ids`. Episode paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chunkdiff_core::datapipe::{Episode, EpisodeManifest};
use chunkdiff_core::types::Image;

use crate::binio::{Reader, Writer};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"CDEP";
const VERSION: u32 = 1;

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let n = ep.len();
    let (h, w) = ep.images.first().and_then(|v| v.first()).map_or((0, 0), |i| (i.height, i.width));
    let mut out = Writer::new(MAGIC, VERSION);
    out.u64(ep.seed);
    out.str(&ep.task_id);
    out.str(&ep.embodiment_id);
    out.str(&ep.instruction);
    out.u32(n as u32);
    out.u32(ep.actions.first().map_or(0, Vec::len) as u32);
    out.u32(ep.proprio.first().map_or(0, Vec::len) as u32);
    out.u32(ep.view_ids.len() as u32);
    out.u32(h as u32);
    out.u32(w as u32);
    for v in &ep.view_ids {
        out.str(v);
    }
    for view in &ep.images {
        for img in view {
            out.buf.extend_from_slice(&img.data);
        }
    }
    for p in &ep.proprio {
        out.f64s(p);
    }
    for a in &ep.actions {
        out.f64s(a);
    }
    out.buf.extend_from_slice(&ep.skills);
    out.finish()
}

pub fn decode_episode(data: &[u8], path: &Path) -> Result<Episode> {
    let mut r = Reader::open(data, path, MAGIC, VERSION)?;
    let seed = r.u64()?;
    let task_id = r.str()?;
    let embodiment_id = r.str()?;
    let instruction = r.str()?;
    let n = r.u32()? as usize;
    let da = r.u32()? as usize;
    let ds = r.u32()? as usize;
    let nv = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if nv == 0 {
        return Err(r.corrupt("episode has no views"));
    }
    let view_ids = (0..nv).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            frames.push(Arc::new(Image { height: h, width: w, data: r.raw(h * w * 3)?.to_vec() }));
        }
        images.push(frames);
    }
    let proprio = (0..n).map(|_| r.f64s(ds)).collect::<Result<Vec<_>>>()?;
    let actions = (0..n).map(|_| r.f64s(da)).collect::<Result<Vec<_>>>()?;
    let skills = r.raw(n)?.to_vec();
    r.expect_end()?;
    Ok(Episode { task_id, embodiment_id, instruction, seed, view_ids, images, proprio, actions, skills })
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode_episode(ep)).map_err(io_err(path))
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let data = fs::read(path).map_err(io_err(path))?;
    decode_episode(&data, path)
}

pub fn write_manifest(m: &EpisodeManifest, path: &Path) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<EpisodeManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| Error::ConfigParse { path: path.to_path_buf(), message: e.message().to_string() })
}

pub fn episode_path(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Checks that every listed episode exists, decodes, and has the declared length.
pub fn validate_manifest(m: &EpisodeManifest, manifest_path: &Path) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    for e in &m.episodes {
        let p = episode_path(manifest_path, &e.path);
        match read_episode(&p) {
            Ok(ep) => {
                if ep.len() != e.length {
                    problems.push(format!("{}: manifest length {} but {} frames", e.path, e.length, ep.len()));
                }
                if ep.actions.iter().any(|a| a.len() != m.native_action_dim) {
                    problems.push(format!("{}: action width differs from {}", e.path, m.native_action_dim));
                }
            }
            Err(err) => problems.push(err.to_string()),
        }
    }
    Ok(problems)
}
