//! Latent generators: a diffusion noise predictor and a direct regressor.
//!
//! [`EpsNet`] is a transformer encoder over `[target tokens, f_obs, f_text, f_t]`
//! whose target-token outputs predict the injected noise. With one token of
//! width `d_z` it is the latent generator; with `h` tokens of width `d_a` it is
//! the trajectory-space baseline that diffuses raw action chunks.
//! [`LatentRegressor`] reads `[query, f_obs, f_text]` and regresses the latent
//! mean directly.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ata::position_table;
use crate::autograd::{Graph, ParamId, ParamSet, Var};
use crate::diffusion::{self, DiffusionError, NoisePredictor, NoiseSchedule, Sampler};
use crate::encoders::{sinusoidal_embedding, ConditionBatch, ObsEncoder};
use crate::nn::{self, interleave_index, tile_index, token_rows, Linear, Mlp, TransformerDims, TransformerEncoder};
use crate::rng::{normal_tensor, seeded_rng, RngStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LpgError {
    #[error("target batch has width {got}, model expects {expected}")]
    TargetShape { got: usize, expected: usize },
    #[error("condition batch has {got} rows for {expected} samples")]
    BatchSize { got: usize, expected: usize },
    #[error("condition features have width {got}, model expects {expected}")]
    FeatureShape { got: usize, expected: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    /// Target tokens per sample.
    pub tokens: usize,
    /// Width of each target token.
    pub width: usize,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    pub dims: TransformerDims,
    pub layers: usize,
    pub time_embed_dim: usize,
}

impl DenoiserShape {
    /// Flattened width of one sample's target.
    pub fn target_dim(&self) -> usize {
        self.tokens * self.width
    }
}

const TARGET: usize = 0;
const OBS: usize = 1;
const TEXT: usize = 2;
const TIME: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsNetArch {
    pub shape: DenoiserShape,
    pub schedule: NoiseSchedule,
    pub obs: ObsEncoder,
    pub text_in: Linear,
    pub target_in: Linear,
    pub time_mlp: Mlp,
    /// One learned offset per token type: target, observation, instruction, time.
    pub types: ParamId,
    pub encoder: TransformerEncoder,
    pub target_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    pub params: ParamSet,
    pub arch: EpsNetArch,
}

/// The three conditioning vectors the noise predictor sees for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub f_obs: Vec<f64>,
    pub f_text: Vec<f64>,
    pub f_t: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LpgLossVars {
    pub loss: Var,
    pub features: Var,
    pub text: Var,
}

fn check_cond(cond: &ConditionBatch, batch: usize, feature_dim: usize) -> Result<(), LpgError> {
    if cond.len() != batch {
        return Err(LpgError::BatchSize { got: cond.len(), expected: batch });
    }
    if cond.features.cols != feature_dim {
        return Err(LpgError::FeatureShape { got: cond.features.cols, expected: feature_dim });
    }
    Ok(())
}

fn type_rows(g: &mut Graph, types: ParamId, kind: usize, n: usize) -> Var {
    let t = g.param(types);
    g.gather_rows(t, vec![kind; n])
}

/// `[f_obs, f_text]` per sample, sample-major, with type offsets added.
fn cond_tokens(
    g: &mut Graph,
    obs: &ObsEncoder,
    text_in: &Linear,
    types: ParamId,
    features: Var,
    text: Var,
    cond: &ConditionBatch,
) -> (Var, Var, Var) {
    let b = cond.len();
    let f_obs = obs.forward(g, features, &cond.proprio);
    let f_text = text_in.forward(g, text);
    let to = type_rows(g, types, OBS, b);
    let tt = type_rows(g, types, TEXT, b);
    let o = g.add(f_obs, to);
    let t = g.add(f_text, tt);
    let all = g.concat_rows(&[o, t]);
    (g.gather_rows(all, interleave_index(b, &[1, 1])), f_obs, f_text)
}

impl EpsNet {
    pub fn new(shape: DenoiserShape, schedule: NoiseSchedule, seed: u64, label: &str) -> Self {
        let mut rng = seeded_rng(seed, &alloc::format!("{label}/init"));
        let mut ps = ParamSet::new();
        let d = shape.dims.d_model;
        let n = |s: &str| alloc::format!("{label}.{s}");
        let obs = ObsEncoder::new(&mut ps, &n("obs"), shape.feature_dim, shape.proprio_dim, d, &mut rng);
        let text_in = Linear::new(&mut ps, &n("text_in"), d, d, &mut rng);
        let target_in = Linear::new(&mut ps, &n("target_in"), shape.width, d, &mut rng);
        let time_mlp = Mlp::new(&mut ps, &n("time_mlp"), &[shape.time_embed_dim, d, d], &mut rng);
        let types = nn::embedding(&mut ps, &n("token_types"), 4, d, 0.02, &mut rng);
        let encoder = TransformerEncoder::new(&mut ps, &n("encoder"), shape.layers, shape.dims, &mut rng);
        let target_out = Linear::new(&mut ps, &n("target_out"), d, shape.width, &mut rng);
        let arch = EpsNetArch { shape, schedule, obs, text_in, target_in, time_mlp, types, encoder, target_out };
        Self { params: ps, arch }
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.arch.shape
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.arch.schedule
    }

    fn time_embedding(&self, g: &mut Graph, ts: &[usize]) -> Var {
        let dim = self.arch.shape.time_embed_dim;
        let mut x = Tensor::zeros(ts.len(), dim);
        for (i, &t) in ts.iter().enumerate() {
            x.row_mut(i).copy_from_slice(&sinusoidal_embedding(t as f64, dim).expect("time_embed_dim is even"));
        }
        let x = g.input(x);
        self.arch.time_mlp.forward(g, x)
    }

    /// Noise prediction for `z` (`B·tokens × width`) given condition tokens
    /// (`2B × d_model`) and time tokens (`B × d_model`).
    fn denoise(&self, g: &mut Graph, z: Var, cond: Var, time: Var, batch: usize) -> Var {
        let s = &self.arch.shape;
        let k = s.tokens;
        let mut x = self.arch.target_in.forward(g, z);
        if k > 1 {
            let pos = g.input(position_table(k, s.dims.d_model));
            let pos = g.gather_rows(pos, tile_index(batch, k));
            x = g.add(x, pos);
        }
        let tx = type_rows(g, self.arch.types, TARGET, batch * k);
        let x = g.add(x, tx);
        let tt = type_rows(g, self.arch.types, TIME, batch);
        let time = g.add(time, tt);
        let all = g.concat_rows(&[x, cond, time]);
        let len = k + 3;
        let seq = g.gather_rows(all, interleave_index(batch, &[k, 2, 1]));
        let out = self.arch.encoder.forward(g, seq, batch, len);
        let idx: Vec<usize> = (0..batch).flat_map(|b| (0..k).map(move |i| b * len + i)).collect();
        let out = g.gather_rows(out, idx);
        self.arch.target_out.forward(g, out)
    }

    fn check(&self, target: &Tensor, cond: &ConditionBatch) -> Result<(), LpgError> {
        let s = &self.arch.shape;
        if target.cols != s.target_dim() {
            return Err(LpgError::TargetShape { got: target.cols, expected: s.target_dim() });
        }
        check_cond(cond, target.rows, s.feature_dim)
    }

    /// `mean ‖ε − ε_θ(√ᾱ_t z0 + √(1−ᾱ_t) ε, t, c)‖²` with explicit `t` and `ε`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        z0: &Tensor,
        cond: &ConditionBatch,
        ts: &[usize],
        eps: &Tensor,
    ) -> Result<LpgLossVars, LpgError> {
        self.check(z0, cond)?;
        assert_eq!(ts.len(), z0.rows, "one timestep per sample");
        assert_eq!(eps.shape(), z0.shape(), "noise shape");
        let s = &self.arch.shape;
        let mut zt = Vec::with_capacity(z0.len());
        for (b, &t) in ts.iter().enumerate() {
            zt.extend(self.arch.schedule.forward_noise(z0.row(b), t, eps.row(b))?);
        }
        let batch = z0.rows;
        let zt = g.input(Tensor::from_vec(batch * s.tokens, s.width, zt));
        let features = g.input(cond.features.clone());
        let text = g.input(cond.text.clone());
        let (ctok, _, _) = cond_tokens(g, &self.arch.obs, &self.arch.text_in, self.arch.types, features, text, cond);
        let time = self.time_embedding(g, ts);
        let pred = self.denoise(g, zt, ctok, time, batch);
        let target = g.input(Tensor::from_vec(batch * s.tokens, s.width, eps.data.clone()));
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        Ok(LpgLossVars { loss, features, text })
    }

    /// One stochastic loss evaluation with `t ~ U{1..T}` and `ε ~ N(0, I)`.
    pub fn loss(&self, z0: &Tensor, cond: &ConditionBatch, rng: &mut RngStream) -> Result<f64, LpgError> {
        use rand::Rng;
        let steps = self.arch.schedule.steps();
        let ts: Vec<usize> = (0..z0.rows).map(|_| rng.random_range(1..=steps)).collect();
        let eps = normal_tensor(rng, z0.rows, z0.cols);
        let mut g = Graph::new(&self.params);
        let v = self.loss_graph(&mut g, z0, cond, &ts, &eps)?;
        Ok(g.value(v.loss).item())
    }

    /// Condition tokens evaluated once, reused across every denoising step.
    fn cached_cond(&self, cond: &ConditionBatch) -> Tensor {
        let mut g = Graph::new(&self.params);
        let features = g.input(cond.features.clone());
        let text = g.input(cond.text.clone());
        let (c, _, _) = cond_tokens(&mut g, &self.arch.obs, &self.arch.text_in, self.arch.types, features, text, cond);
        g.value(c).clone()
    }

    /// `ε_θ` for a `B × target_dim` batch at a shared timestep.
    pub fn predict(&self, z: &Tensor, t: usize, cond: &ConditionBatch) -> Result<Tensor, LpgError> {
        self.check(z, cond)?;
        let c = self.cached_cond(cond);
        Ok(self.predict_cached(z, t, &c))
    }

    fn predict_cached(&self, z: &Tensor, t: usize, cond_tokens: &Tensor) -> Tensor {
        let s = &self.arch.shape;
        let batch = z.rows;
        let mut g = Graph::new(&self.params);
        let zv = g.input(Tensor::from_vec(batch * s.tokens, s.width, z.data.clone()));
        let c = g.input(cond_tokens.clone());
        let time = self.time_embedding(&mut g, &[t]);
        let time = g.gather_rows(time, vec![0; batch]);
        let out = self.denoise(&mut g, zv, c, time, batch);
        let out = g.value(out);
        Tensor::from_vec(batch, s.target_dim(), out.data.clone())
    }

    /// A [`NoisePredictor`] bound to one condition batch.
    pub fn predictor<'a>(&'a self, cond: &ConditionBatch) -> Result<BoundEpsNet<'a>, LpgError> {
        check_cond(cond, cond.len(), self.arch.shape.feature_dim)?;
        Ok(BoundEpsNet { net: self, cond_tokens: self.cached_cond(cond) })
    }

    /// Draws one target per condition row by running the reverse process.
    pub fn sample(&self, cond: &ConditionBatch, sampler: Sampler, rng: &mut RngStream) -> Result<Tensor, LpgError> {
        let p = self.predictor(cond)?;
        Ok(diffusion::sample(&p, &self.arch.schedule, sampler, cond.len(), self.arch.shape.target_dim(), rng)?)
    }

    /// The conditioning vectors for the first row of `cond` at timestep `t`.
    pub fn conditioning_bundle(&self, cond: &ConditionBatch, t: usize) -> Result<ConditioningBundle, LpgError> {
        check_cond(cond, cond.len(), self.arch.shape.feature_dim)?;
        let one = cond.select(&[0]);
        let mut g = Graph::new(&self.params);
        let features = g.input(one.features.clone());
        let text = g.input(one.text.clone());
        let (_, f_obs, f_text) = cond_tokens(&mut g, &self.arch.obs, &self.arch.text_in, self.arch.types, features, text, &one);
        let f_t = self.time_embedding(&mut g, &[t]);
        Ok(ConditioningBundle {
            f_obs: g.value(f_obs).data.clone(),
            f_text: g.value(f_text).data.clone(),
            f_t: g.value(f_t).data.clone(),
        })
    }
}

pub struct BoundEpsNet<'a> {
    net: &'a EpsNet,
    cond_tokens: Tensor,
}

impl NoisePredictor for BoundEpsNet<'_> {
    fn predict(&self, z: &Tensor, t: usize) -> Tensor {
        self.net.predict_cached(z, t, &self.cond_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressorShape {
    pub width: usize,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    pub dims: TransformerDims,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorArch {
    pub shape: RegressorShape,
    pub obs: ObsEncoder,
    pub text_in: Linear,
    pub query: ParamId,
    /// Offsets for the observation and instruction tokens (the query is already learned).
    pub types: ParamId,
    pub encoder: TransformerEncoder,
    pub out: Linear,
}

/// Non-diffusion ablation: predicts the latent mean in a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRegressor {
    pub params: ParamSet,
    pub arch: RegressorArch,
}

impl LatentRegressor {
    pub fn new(shape: RegressorShape, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "regressor/init");
        let mut ps = ParamSet::new();
        let d = shape.dims.d_model;
        let obs = ObsEncoder::new(&mut ps, "reg.obs", shape.feature_dim, shape.proprio_dim, d, &mut rng);
        let text_in = Linear::new(&mut ps, "reg.text_in", d, d, &mut rng);
        let query = nn::embedding(&mut ps, "reg.query", 1, d, 0.5, &mut rng);
        let types = nn::embedding(&mut ps, "reg.token_types", 4, d, 0.02, &mut rng);
        let encoder = TransformerEncoder::new(&mut ps, "reg.encoder", shape.layers, shape.dims, &mut rng);
        let out = Linear::new(&mut ps, "reg.out", d, shape.width, &mut rng);
        Self { params: ps, arch: RegressorArch { shape, obs, text_in, query, types, encoder, out } }
    }

    fn forward(&self, g: &mut Graph, cond: &ConditionBatch) -> (Var, Var, Var) {
        let b = cond.len();
        let features = g.input(cond.features.clone());
        let text = g.input(cond.text.clone());
        let a = &self.arch;
        let (ctok, _, _) = cond_tokens(g, &a.obs, &a.text_in, a.types, features, text, cond);
        let q = g.param(a.query);
        let q = g.gather_rows(q, vec![0; b]);
        let all = g.concat_rows(&[q, ctok]);
        let seq = g.gather_rows(all, interleave_index(b, &[1, 2]));
        let out = a.encoder.forward(g, seq, b, 3);
        let out = g.gather_rows(out, token_rows(b, 3, 0));
        (a.out.forward(g, out), features, text)
    }

    pub fn predict(&self, cond: &ConditionBatch) -> Result<Tensor, LpgError> {
        check_cond(cond, cond.len(), self.arch.shape.feature_dim)?;
        let mut g = Graph::new(&self.params);
        let (out, _, _) = self.forward(&mut g, cond);
        Ok(g.value(out).clone())
    }

    /// `mean ‖target − f(c)‖²`.
    pub fn loss_graph(&self, g: &mut Graph, target: &Tensor, cond: &ConditionBatch) -> Result<LpgLossVars, LpgError> {
        if target.cols != self.arch.shape.width {
            return Err(LpgError::TargetShape { got: target.cols, expected: self.arch.shape.width });
        }
        check_cond(cond, target.rows, self.arch.shape.feature_dim)?;
        let (out, features, text) = self.forward(g, cond);
        let t = g.input(target.clone());
        let d = g.sub(out, t);
        let sq = g.square(d);
        let loss = g.mean(sq);
        Ok(LpgLossVars { loss, features, text })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ProprioBatch;

    fn shape(tokens: usize, width: usize) -> DenoiserShape {
        DenoiserShape {
            tokens,
            width,
            feature_dim: 5,
            proprio_dim: 2,
            dims: TransformerDims { d_model: 8, heads: 2, ff_dim: 16 },
            layers: 2,
            time_embed_dim: 8,
        }
    }

    fn cond(n: usize, seed: u64) -> ConditionBatch {
        let mut rng = seeded_rng(seed, "lpg-test");
        ConditionBatch {
            features: normal_tensor(&mut rng, n, 5),
            proprio: ProprioBatch::absent(n, 2),
            text: normal_tensor(&mut rng, n, 8),
        }
    }

    #[test]
    fn untrained_loss_is_near_unit_variance() {
        let net = EpsNet::new(shape(1, 4), NoiseSchedule::linear(100).unwrap(), 0, "lpg");
        let c = cond(64, 1);
        let z0 = normal_tensor(&mut seeded_rng(2, "z"), 64, 4);
        let l = net.loss(&z0, &c, &mut seeded_rng(3, "l")).unwrap();
        assert!(l > 0.3 && l < 4.0, "{l}");
    }

    #[test]
    fn predict_batches_are_row_independent() {
        let net = EpsNet::new(shape(3, 2), NoiseSchedule::linear(50).unwrap(), 4, "traj");
        let c = cond(3, 5);
        let z = normal_tensor(&mut seeded_rng(6, "z"), 3, 6);
        let all = net.predict(&z, 17, &c).unwrap();
        let one = net.predict(&Tensor::from_vec(1, 6, z.row(1).to_vec()), 17, &c.select(&[1])).unwrap();
        for (a, b) in all.row(1).iter().zip(one.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_shape_and_determinism() {
        let net = EpsNet::new(shape(1, 4), NoiseSchedule::linear(20).unwrap(), 7, "lpg");
        let c = cond(2, 8);
        let a = net.sample(&c, Sampler::Ddim { steps: 5 }, &mut seeded_rng(1, "s")).unwrap();
        let b = net.sample(&c, Sampler::Ddim { steps: 5 }, &mut seeded_rng(1, "s")).unwrap();
        assert_eq!(a.shape(), (2, 4));
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn bundle_time_vector_depends_only_on_t() {
        let net = EpsNet::new(shape(1, 4), NoiseSchedule::linear(100).unwrap(), 9, "lpg");
        let a = net.conditioning_bundle(&cond(1, 1), 10).unwrap();
        let b = net.conditioning_bundle(&cond(1, 2), 10).unwrap();
        let c = net.conditioning_bundle(&cond(1, 1), 11).unwrap();
        assert_eq!(a.f_t, b.f_t);
        assert_ne!(a.f_t, c.f_t);
        assert_ne!(a.f_obs, b.f_obs);
        assert_eq!(a.f_t.len(), 8);
    }

    #[test]
    fn regressor_shapes_and_errors() {
        let reg = LatentRegressor::new(
            RegressorShape { width: 4, feature_dim: 5, proprio_dim: 2, dims: shape(1, 4).dims, layers: 1 },
            0,
        );
        let c = cond(3, 2);
        assert_eq!(reg.predict(&c).unwrap().shape(), (3, 4));
        let mut g = Graph::new(&reg.params);
        assert!(matches!(reg.loss_graph(&mut g, &Tensor::zeros(3, 5), &c), Err(LpgError::TargetShape { .. })));
    }
}
