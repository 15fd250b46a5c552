//! Versioned binary checkpoint container.
//!
//! Layout after the common header (see [`crate::binio`]):
//!
//! ```text
//! kind            str
//! config          str   (resolved run file)
//! config_hash     str   (hex SHA-256 of `config`)
//! step            u64
//! arch            str   (JSON model structure)
//! n_params        u32
//!   name str | rows u32 | cols u32 | rows*cols f64
//! has_optimizer   u8
//!   beta1 beta2 eps weight_decay grad_clip f64 | step u64 | m tensors | v tensors
//! n_aux           u32
//!   name str | bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chunkdiff_core::autograd::ParamSet;
use chunkdiff_core::config::RunConfig;
use chunkdiff_core::optim::AdamW;
use chunkdiff_core::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{io_err, Error, Result};
use crate::runfile::{config_hash, config_to_string, hex, parse_config};

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: RunConfig,
    pub step: u64,
    pub arch: String,
    pub params: ParamSet,
    pub optimizer: Option<AdamW>,
    pub aux: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Receipt {
    pub path: PathBuf,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    /// Non-fatal findings, e.g. a config hash that differs from the current run.
    pub warnings: Vec<String>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &RunConfig, step: u64, params: &ParamSet, arch: &impl Serialize) -> Self {
        Self {
            kind: kind.into(),
            config: config.clone(),
            step,
            arch: serde_json::to_string(arch).expect("model structure serializes"),
            params: params.clone(),
            optimizer: None,
            aux: BTreeMap::new(),
        }
    }

    pub fn arch<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_str(&self.arch).map_err(|e| Error::Format(format!("checkpoint `{}` structure: {e}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Incompatible(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn set_aux_json(&mut self, name: &str, value: &impl Serialize) {
        self.aux.insert(name.into(), serde_json::to_vec(value).expect("aux serializes"));
    }

    pub fn aux_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let raw = self.aux.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` record")))?;
        serde_json::from_slice(raw).map_err(|e| Error::Format(format!("checkpoint record `{name}`: {e}")))
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u32(t.rows as u32);
    w.u32(t.cols as u32);
    w.f64s(&t.data);
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f64s(rows * cols)?;
    Ok(Tensor::from_vec(rows, cols, data))
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(&c.kind);
    w.str(&config_to_string(&c.config));
    w.str(&config_hash(&c.config));
    w.u64(c.step);
    w.str(&c.arch);
    w.u32(c.params.len() as u32);
    for (name, t) in c.params.iter() {
        w.str(name);
        write_tensor(&mut w, t);
    }
    match &c.optimizer {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            w.f64s(&[o.beta1, o.beta2, o.eps, o.weight_decay, o.grad_clip]);
            w.u64(o.step);
            for t in o.m.iter().chain(&o.v) {
                write_tensor(&mut w, t);
            }
        }
    }
    w.u32(c.aux.len() as u32);
    for (k, v) in &c.aux {
        w.str(k);
        w.bytes(v);
    }
    w.finish()
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<Receipt> {
    let bytes = encode_checkpoint(c);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(Receipt { path: path.to_path_buf(), bytes: bytes.len(), sha256: hex(&Sha256::digest(&bytes)) })
}

pub fn decode_checkpoint(data: &[u8], path: &Path, current: Option<&RunConfig>) -> Result<Loaded> {
    let mut r = Reader::open(data, path, MAGIC, VERSION)?;
    let kind = r.str()?;
    let config_text = r.str()?;
    let stored_hash = r.str()?;
    let config = parse_config(&config_text, path)?;
    let mut warnings = Vec::new();
    if config_hash(&config) != stored_hash {
        return Err(r.corrupt("embedded config does not match its hash"));
    }
    if let Some(cur) = current {
        if config_hash(cur) != stored_hash {
            warnings.push(format!(
                "{}: checkpoint config hash {} differs from current run {}",
                path.display(),
                &stored_hash[..12],
                &config_hash(cur)[..12]
            ));
        }
    }
    let step = r.u64()?;
    let arch = r.str()?;
    let n = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name = r.str()?;
        params.add(name, read_tensor(&mut r)?);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let h = r.f64s(5)?;
            let step = r.u64()?;
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(read_tensor(&mut r)?);
            }
            for _ in 0..n {
                v.push(read_tensor(&mut r)?);
            }
            Some(AdamW { beta1: h[0], beta2: h[1], eps: h[2], weight_decay: h[3], grad_clip: h[4], step, m, v })
        }
        _ => return Err(r.corrupt("bad optimizer flag")),
    };
    let n_aux = r.u32()? as usize;
    let mut aux = BTreeMap::new();
    for _ in 0..n_aux {
        let k = r.str()?;
        aux.insert(k, r.bytes()?.to_vec());
    }
    r.expect_end()?;
    Ok(Loaded { checkpoint: Checkpoint { kind, config, step, arch, params, optimizer, aux }, warnings })
}

/// Reads a checkpoint; a config differing from `current` yields a warning, not an error.
pub fn load_checkpoint(path: &Path, current: Option<&RunConfig>) -> Result<Loaded> {
    let data = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&data, path, current)
}
