//! Training loops for the action autoencoder, the latent generators and the
//! trajectory-space baseline.
//!
//! Every phase uses AdamW with linear warmup and cosine decay, evaluates a fixed
//! validation sample after each epoch, and returns the parameters of the epoch
//! with the lowest validation loss.

use std::time::Instant;

use chunkdiff_core::ata::{AtaModel, AtaShape};
use chunkdiff_core::autograd::{Graph, ParamSet};
use chunkdiff_core::config::RunConfig;
use chunkdiff_core::datapipe::SampleRef;
use chunkdiff_core::diffusion::NoiseSchedule;
use chunkdiff_core::lpg::{DenoiserShape, EpsNet, LatentRegressor, RegressorShape};
use chunkdiff_core::optim::{AdamW, CosineSchedule};
use chunkdiff_core::rng::{normal_tensor, seeded_rng, RngStream};
use chunkdiff_core::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DataSuite;
use crate::error::{Error, Result};
use crate::rundir::Logger;

/// Validation samples evaluated per epoch.
pub const VAL_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: String,
    pub epochs: usize,
    pub steps: u64,
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub seconds: f64,
}

impl TrainLog {
    pub fn first_train_loss(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |c| c.train_loss)
    }

    pub fn last_train_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |c| c.train_loss)
    }
}

/// A model plus the loss it is trained on.
pub trait Objective {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Loss and parameter gradients on one training batch.
    fn train_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<(f64, Vec<Tensor>)>;
    /// Loss on `refs` with noise drawn from `rng`, no gradients.
    fn eval_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<f64>;
}

fn mean_over_batches(
    obj: &impl Objective,
    suite: &DataSuite,
    refs: &[SampleRef],
    batch: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut acc = 0.0;
    for part in refs.chunks(batch) {
        acc += obj.eval_batch(suite, part, rng)? * part.len() as f64;
    }
    Ok(acc / refs.len() as f64)
}

/// Runs `epochs` passes over the training split and restores the best-validation parameters.
pub fn fit(
    phase: &str,
    cfg: &RunConfig,
    suite: &DataSuite,
    epochs: usize,
    obj: &mut impl Objective,
    log: &Logger,
) -> Result<TrainLog> {
    let started = Instant::now();
    let mut stream = suite.stream(cfg, phase)?;
    let per_epoch = stream.steps_per_epoch();
    let total = (epochs * per_epoch) as u64;
    let schedule = CosineSchedule { peak: cfg.lr_peak, warmup: cfg.warmup_steps, total };
    let mut opt = AdamW::new(obj.params(), cfg.weight_decay, cfg.grad_clip);
    let val_refs = suite.val_sample(VAL_SAMPLES);
    log.log(&format!(
        "{phase}: {epochs} epochs x {per_epoch} steps, {} train samples, {} val samples",
        stream.total_samples(),
        val_refs.len()
    ));
    let mut step = 0u64;
    let mut curve = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 1..=epochs {
        let mut acc = 0.0;
        let mut lr = 0.0;
        for _ in 0..per_epoch {
            let refs = stream.next_batch();
            let (loss, mut grads) = obj.train_batch(suite, &refs, stream.rng())?;
            step += 1;
            if !loss.is_finite() {
                log.log(&format!("{phase}: non-finite loss {loss} at step {step}"));
                return Err(Error::Diverged { phase: phase.into(), step, loss });
            }
            lr = schedule.lr(step);
            opt.update(obj.params_mut(), &mut grads, lr);
            acc += loss;
        }
        let train_loss = acc / per_epoch as f64;
        let val_loss = if val_refs.is_empty() {
            train_loss
        } else {
            let mut vrng = seeded_rng(cfg.seed, &format!("{phase}/val"));
            mean_over_batches(obj, suite, &val_refs, cfg.batch_size, &mut vrng)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { phase: phase.into(), step, loss: val_loss });
        }
        log.log(&format!("{phase}: epoch {epoch}/{epochs} step {step} lr {lr:.2e} train {train_loss:.5} val {val_loss:.5}"));
        curve.push(CurvePoint { epoch, step, lr, train_loss, val_loss });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, obj.params().clone()));
        }
    }
    let (best_val, best_epoch, params) = best.expect("at least one epoch");
    *obj.params_mut() = params;
    Ok(TrainLog {
        phase: phase.into(),
        epochs,
        steps: step,
        curve,
        best_epoch,
        best_val,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::new(cfg.diffusion_steps, cfg.schedule, cfg.beta_start, cfg.beta_end)?)
}

pub fn new_ata(cfg: &RunConfig, feature_dim: usize) -> AtaModel {
    AtaModel::new(AtaShape::from_config(cfg, feature_dim), cfg.seed)
}

pub fn lpg_shape(cfg: &RunConfig, feature_dim: usize) -> DenoiserShape {
    DenoiserShape {
        tokens: 1,
        width: cfg.d_z,
        feature_dim,
        proprio_dim: cfg.proprio_dim,
        dims: cfg.dims(),
        layers: cfg.lpg_layers,
        time_embed_dim: cfg.time_embed_dim,
    }
}

/// The baseline denoises `h` tokens of width `d_a` with the same transformer.
pub fn trajectory_shape(cfg: &RunConfig, feature_dim: usize) -> DenoiserShape {
    DenoiserShape { tokens: cfg.horizon, width: cfg.action_dim, ..lpg_shape(cfg, feature_dim) }
}

pub fn new_lpg(cfg: &RunConfig, feature_dim: usize) -> Result<EpsNet> {
    Ok(EpsNet::new(lpg_shape(cfg, feature_dim), schedule(cfg)?, cfg.seed, "lpg"))
}

pub fn new_trajectory(cfg: &RunConfig, feature_dim: usize) -> Result<EpsNet> {
    Ok(EpsNet::new(trajectory_shape(cfg, feature_dim), schedule(cfg)?, cfg.seed, "trajectory"))
}

pub fn new_regressor(cfg: &RunConfig, feature_dim: usize) -> LatentRegressor {
    LatentRegressor::new(
        RegressorShape { width: cfg.d_z, feature_dim, proprio_dim: cfg.proprio_dim, dims: cfg.dims(), layers: cfg.lpg_layers },
        cfg.seed,
    )
}

pub struct AtaObjective {
    pub model: AtaModel,
    pub kl_weight: f64,
}

impl Objective for AtaObjective {
    fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn train_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<(f64, Vec<Tensor>)> {
        let (chunks, cond) = suite.batch(refs, Some(rng));
        let noise = normal_tensor(rng, refs.len(), self.model.arch.shape.d_z);
        let mut g = Graph::new(&self.model.params);
        let v = self.model.loss_graph(&mut g, &chunks, &cond, self.kl_weight, &noise)?;
        let loss = g.value(v.loss).item();
        Ok((loss, g.backward(v.loss).into_param_grads(&self.model.params)))
    }

    fn eval_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<f64> {
        let (chunks, cond) = suite.batch(refs, None);
        Ok(self.model.loss(&chunks, &cond, self.kl_weight, rng)?.loss)
    }
}

/// Posterior means of the frozen autoencoder: the latent generator's targets.
fn latent_targets(
    ata: &AtaModel,
    suite: &DataSuite,
    refs: &[SampleRef],
    rng: Option<&mut RngStream>,
) -> Result<(Tensor, chunkdiff_core::encoders::ConditionBatch)> {
    let (chunks, cond) = suite.batch(refs, rng);
    let post = ata.encode(&chunks, &cond)?;
    Ok((post.mu, cond))
}

fn diffusion_draws(net: &EpsNet, rows: usize, cols: usize, rng: &mut RngStream) -> (Vec<usize>, Tensor) {
    let steps = net.schedule().steps();
    let ts = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
    (ts, normal_tensor(rng, rows, cols))
}

pub struct LpgObjective<'a> {
    pub net: EpsNet,
    pub ata: &'a AtaModel,
}

impl Objective for LpgObjective<'_> {
    fn params(&self) -> &ParamSet {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    fn train_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<(f64, Vec<Tensor>)> {
        let (z0, cond) = latent_targets(self.ata, suite, refs, Some(rng))?;
        let (ts, eps) = diffusion_draws(&self.net, z0.rows, z0.cols, rng);
        let mut g = Graph::new(&self.net.params);
        let v = self.net.loss_graph(&mut g, &z0, &cond, &ts, &eps)?;
        let loss = g.value(v.loss).item();
        Ok((loss, g.backward(v.loss).into_param_grads(&self.net.params)))
    }

    fn eval_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<f64> {
        let (z0, cond) = latent_targets(self.ata, suite, refs, None)?;
        Ok(self.net.loss(&z0, &cond, rng)?)
    }
}

pub struct RegressorObjective<'a> {
    pub model: LatentRegressor,
    pub ata: &'a AtaModel,
}

impl Objective for RegressorObjective<'_> {
    fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn train_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<(f64, Vec<Tensor>)> {
        let (mu, cond) = latent_targets(self.ata, suite, refs, Some(rng))?;
        let mut g = Graph::new(&self.model.params);
        let v = self.model.loss_graph(&mut g, &mu, &cond)?;
        let loss = g.value(v.loss).item();
        Ok((loss, g.backward(v.loss).into_param_grads(&self.model.params)))
    }

    fn eval_batch(&self, suite: &DataSuite, refs: &[SampleRef], _rng: &mut RngStream) -> Result<f64> {
        let (mu, cond) = latent_targets(self.ata, suite, refs, None)?;
        let mut g = Graph::new(&self.model.params);
        let v = self.model.loss_graph(&mut g, &mu, &cond)?;
        Ok(g.value(v.loss).item())
    }
}

/// Flattened normalized chunks, `B × h·d_a`.
fn chunk_targets(
    suite: &DataSuite,
    refs: &[SampleRef],
    rng: Option<&mut RngStream>,
) -> (Tensor, chunkdiff_core::encoders::ConditionBatch) {
    let (chunks, cond) = suite.batch(refs, rng);
    let width = chunks[0].values.len();
    let mut x = Tensor::zeros(chunks.len(), width);
    for (i, c) in chunks.iter().enumerate() {
        x.row_mut(i).copy_from_slice(&c.values);
    }
    (x, cond)
}

pub struct TrajectoryObjective {
    pub net: EpsNet,
}

impl Objective for TrajectoryObjective {
    fn params(&self) -> &ParamSet {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net.params
    }

    fn train_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<(f64, Vec<Tensor>)> {
        let (x0, cond) = chunk_targets(suite, refs, Some(rng));
        let (ts, eps) = diffusion_draws(&self.net, x0.rows, x0.cols, rng);
        let mut g = Graph::new(&self.net.params);
        let v = self.net.loss_graph(&mut g, &x0, &cond, &ts, &eps)?;
        let loss = g.value(v.loss).item();
        Ok((loss, g.backward(v.loss).into_param_grads(&self.net.params)))
    }

    fn eval_batch(&self, suite: &DataSuite, refs: &[SampleRef], rng: &mut RngStream) -> Result<f64> {
        let (x0, cond) = chunk_targets(suite, refs, None);
        Ok(self.net.loss(&x0, &cond, rng)?)
    }
}

/// Trains the autoencoder, starting from `init` when given.
pub fn train_ata(
    cfg: &RunConfig,
    suite: &DataSuite,
    init: Option<AtaModel>,
    epochs: usize,
    phase: &str,
    log: &Logger,
) -> Result<(AtaModel, TrainLog)> {
    let model = init.unwrap_or_else(|| new_ata(cfg, suite.feature_dim));
    let mut obj = AtaObjective { model, kl_weight: cfg.kl_weight };
    let tl = fit(phase, cfg, suite, epochs, &mut obj, log)?;
    Ok((obj.model, tl))
}

/// Trains the latent diffusion generator against a frozen autoencoder.
pub fn train_lpg(
    cfg: &RunConfig,
    suite: &DataSuite,
    ata: &AtaModel,
    init: Option<EpsNet>,
    epochs: usize,
    phase: &str,
    log: &Logger,
) -> Result<(EpsNet, TrainLog)> {
    let before = ata.params.checksum();
    let net = match init {
        Some(n) => n,
        None => new_lpg(cfg, suite.feature_dim)?,
    };
    let mut obj = LpgObjective { net, ata };
    let tl = fit(phase, cfg, suite, epochs, &mut obj, log)?;
    if ata.params.checksum() != before {
        return Err(Error::FrozenViolation);
    }
    Ok((obj.net, tl))
}

pub fn train_regressor(
    cfg: &RunConfig,
    suite: &DataSuite,
    ata: &AtaModel,
    init: Option<LatentRegressor>,
    epochs: usize,
    phase: &str,
    log: &Logger,
) -> Result<(LatentRegressor, TrainLog)> {
    let before = ata.params.checksum();
    let model = init.unwrap_or_else(|| new_regressor(cfg, suite.feature_dim));
    let mut obj = RegressorObjective { model, ata };
    let tl = fit(phase, cfg, suite, epochs, &mut obj, log)?;
    if ata.params.checksum() != before {
        return Err(Error::FrozenViolation);
    }
    Ok((obj.model, tl))
}

pub fn train_trajectory(
    cfg: &RunConfig,
    suite: &DataSuite,
    epochs: usize,
    phase: &str,
    log: &Logger,
) -> Result<(EpsNet, TrainLog)> {
    let mut obj = TrajectoryObjective { net: new_trajectory(cfg, suite.feature_dim)? };
    let tl = fit(phase, cfg, suite, epochs, &mut obj, log)?;
    Ok((obj.net, tl))
}
