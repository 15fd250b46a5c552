//! Run configuration files.
//!
//! A run file is flat TOML: one `key = value` per line, keys as in [`RunConfig`]
//! (`h`, `w` and `T` for horizon, KL weight and diffusion steps). Dataset
//! mixture weights go in an optional `[mixture]` table. Missing keys take their
//! defaults; unknown keys are rejected.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chunkdiff_core::config::RunConfig;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::ConfigParse { path: origin.to_path_buf(), message: e.message().to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, path)
}

pub fn config_to_string(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("run config serializes")
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, config_to_string(cfg)).map_err(io_err(path))
}

/// Hex SHA-256 of the canonical serialization.
pub fn config_hash(cfg: &RunConfig) -> String {
    hex(&Sha256::digest(config_to_string(cfg).as_bytes()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Keys whose resolved values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let to_pairs = |c: &RunConfig| {
        let mut out = Vec::new();
        flatten("", &toml::Value::try_from(c).expect("run config serializes"), &mut out);
        out
    };
    let (pa, pb) = (to_pairs(a), to_pairs(b));
    let keys: BTreeSet<&String> = pa.iter().chain(&pb).map(|(k, _)| k).collect();
    keys.into_iter()
        .filter(|k| {
            let va = pa.iter().find(|(x, _)| x == *k).map(|(_, v)| v);
            let vb = pb.iter().find(|(x, _)| x == *k).map(|(_, v)| v);
            va != vb
        })
        .cloned()
        .collect()
}
