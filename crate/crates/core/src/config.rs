//! Resolved run configuration.
//!
//! Every field has a default, so an empty run file is a complete configuration.
//! Field names double as the keys of the on-disk run format; a few keep the
//! short names used throughout the docs (`h`, `w`, `T`).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::nn::TransformerDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// What the action autoencoder is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtaConditioning {
    /// Observation features only (task-agnostic).
    Obs,
    /// Observation and instruction features.
    ObsText,
    /// Neither; the latent alone drives the decoder.
    None,
}

/// How latents are produced from conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpgKind {
    Diffusion,
    /// Direct L2 regression of the latent mean with a transformer encoder.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed for the frozen image and instruction encoders; must stay fixed across phases.
    pub encoder_seed: u64,
    #[serde(rename = "h")]
    pub horizon: usize,
    pub d_z: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub time_embed_dim: usize,
    pub lpg_layers: usize,
    #[serde(rename = "w")]
    pub kl_weight: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub ata_epochs: usize,
    pub lpg_epochs: usize,
    /// Multiplier on every phase's epoch count (desk-scale runs use < 1).
    pub epoch_scale: f64,
    #[serde(rename = "T")]
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub sampler: SamplerKind,
    pub sampler_steps: usize,
    pub clip_quantile: f64,
    pub val_fraction: f64,
    pub image_size: usize,
    /// Canonical (padded) action width shared by every dataset in a run.
    pub action_dim: usize,
    /// Canonical (padded) proprioception width.
    pub proprio_dim: usize,
    pub step_limit: usize,
    pub n_trials: usize,
    /// Steps of each predicted chunk executed before re-planning; 0 means all `h`.
    pub exec_horizon: usize,
    pub bench_iterations: usize,
    pub ata_conditioning: AtaConditioning,
    pub lpg_kind: LpgKind,
    pub use_pretrain: bool,
    /// Relative sampling weight per dataset id; datasets not listed get weight 1.
    pub mixture: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder_seed: 0,
            horizon: 16,
            d_z: 64,
            d_model: 256,
            n_heads: 4,
            ff_dim: 1024,
            time_embed_dim: 128,
            lpg_layers: 6,
            kl_weight: 0.01,
            lr_peak: 1e-4,
            warmup_steps: 1000,
            weight_decay: 0.0,
            grad_clip: 1.0,
            batch_size: 64,
            pretrain_epochs: 10,
            ata_epochs: 200,
            lpg_epochs: 100,
            epoch_scale: 1.0,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            schedule: ScheduleKind::Linear,
            sampler: SamplerKind::Ddpm,
            sampler_steps: 1000,
            clip_quantile: 0.005,
            val_fraction: 0.05,
            image_size: 88,
            action_dim: 7,
            proprio_dim: 8,
            step_limit: 400,
            n_trials: 50,
            exec_horizon: 0,
            bench_iterations: 100,
            ata_conditioning: AtaConditioning::Obs,
            lpg_kind: LpgKind::Diffusion,
            use_pretrain: true,
            mixture: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config key `{key}`: {reason}")]
pub struct ConfigDomainError {
    pub key: String,
    pub reason: String,
}

fn bad(key: &str, reason: &str) -> ConfigDomainError {
    ConfigDomainError { key: key.to_string(), reason: reason.to_string() }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigDomainError> {
        let pos = |v: usize, key: &str| if v == 0 { Err(bad(key, "must be positive")) } else { Ok(()) };
        pos(self.horizon, "h")?;
        pos(self.d_z, "d_z")?;
        pos(self.d_model, "d_model")?;
        pos(self.n_heads, "n_heads")?;
        pos(self.ff_dim, "ff_dim")?;
        pos(self.lpg_layers, "lpg_layers")?;
        pos(self.batch_size, "batch_size")?;
        pos(self.diffusion_steps, "T")?;
        pos(self.sampler_steps, "sampler_steps")?;
        pos(self.image_size, "image_size")?;
        pos(self.action_dim, "action_dim")?;
        pos(self.step_limit, "step_limit")?;
        pos(self.n_trials, "n_trials")?;
        pos(self.bench_iterations, "bench_iterations")?;
        // run files are TOML, whose integers are signed 64-bit
        for (v, key) in [(self.seed, "seed"), (self.encoder_seed, "encoder_seed"), (self.warmup_steps, "warmup_steps")] {
            if v > i64::MAX as u64 {
                return Err(bad(key, "must not exceed 2^63 - 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(bad("n_heads", "must divide d_model"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(bad("time_embed_dim", "must be positive and even"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(bad("w", "must be a finite value >= 0"));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(bad("lr_peak", "must be positive"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if !(self.epoch_scale > 0.0 && self.epoch_scale.is_finite()) {
            return Err(bad("epoch_scale", "must be positive"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(bad("beta_start", "must lie in (0, 1)"));
        }
        if !(self.beta_end >= self.beta_start && self.beta_end < 1.0) {
            return Err(bad("beta_end", "must lie in [beta_start, 1)"));
        }
        if self.sampler_steps > self.diffusion_steps {
            return Err(bad("sampler_steps", "must not exceed T"));
        }
        if self.sampler == SamplerKind::Ddpm && self.sampler_steps != self.diffusion_steps {
            return Err(bad("sampler_steps", "ddpm visits every step and needs sampler_steps = T"));
        }
        if !(0.0..0.5).contains(&self.clip_quantile) {
            return Err(bad("clip_quantile", "must lie in [0, 0.5)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(bad("val_fraction", "must lie in (0, 1)"));
        }
        if self.image_size > crate::envsuite::RENDER_SIZE {
            return Err(bad("image_size", "must not exceed the rendered frame size"));
        }
        if !self.image_size.is_multiple_of(8) {
            return Err(bad("image_size", "must be a multiple of 8"));
        }
        if self.exec_horizon > self.horizon {
            return Err(bad("exec_horizon", "must not exceed h"));
        }
        for (k, v) in &self.mixture {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(ConfigDomainError { key: alloc::format!("mixture.{k}"), reason: "weight must be >= 0".into() });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> TransformerDims {
        TransformerDims { d_model: self.d_model, heads: self.n_heads, ff_dim: self.ff_dim }
    }

    pub fn executed_steps(&self) -> usize {
        if self.exec_horizon == 0 {
            self.horizon
        } else {
            self.exec_horizon
        }
    }

    /// Epochs for a phase after applying `epoch_scale`, never below one.
    pub fn scaled_epochs(&self, epochs: usize) -> usize {
        let e = (epochs as f64 * self.epoch_scale).ceil() as usize;
        e.max(1)
    }

    pub fn mixture_weight(&self, dataset_id: &str) -> f64 {
        self.mixture.get(dataset_id).copied().unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_details() {
        let c = RunConfig::default();
        assert_eq!(c.kl_weight, 0.01);
        assert_eq!(c.horizon, 16);
        assert_eq!(c.diffusion_steps, 1000);
        assert_eq!(c.warmup_steps, 1000);
        assert_eq!(c.lr_peak, 1e-4);
        assert_eq!(c.val_fraction, 0.05);
        assert_eq!(c.step_limit, 400);
        assert_eq!(c.n_trials, 50);
        c.validate().unwrap();
    }

    #[test]
    fn negative_kl_weight_names_key() {
        let c = RunConfig { kl_weight: -1.0, ..RunConfig::default() };
        assert_eq!(c.validate().unwrap_err().key, "w");
    }

    #[test]
    fn epoch_scaling_rounds_up() {
        let c = RunConfig { epoch_scale: 0.01, ..RunConfig::default() };
        assert_eq!(c.scaled_epochs(200), 2);
        assert_eq!(c.scaled_epochs(10), 1);
    }
}
