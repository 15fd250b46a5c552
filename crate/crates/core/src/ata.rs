//! Action trajectory autoencoder: an observation-conditioned VAE over action chunks.
//!
//! The encoder reads `[cls, f_obs, a_1 .. a_h]` and maps the `cls` feature to
//! `2·d_z` numbers (mean and log-variance). The decoder runs fixed sinusoidal
//! position queries `p_1 .. p_h` through self-attention and cross-attention into
//! the memory `[f_obs, z]`, and squashes the result with `tanh` so outputs share
//! the `[-1, 1]` range of normalized actions.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamSet, Var};
use crate::config::{AtaConditioning, RunConfig};
use crate::encoders::{sinusoidal_embedding, ConditionBatch, ObsEncoder};
use crate::nn::{
    self, interleave_index, tile_index, token_rows, Linear, TransformerDecoder, TransformerDims, TransformerEncoder,
};
use crate::rng::{normal, normal_tensor, seeded_rng, RngStream};
use crate::tensor::Tensor;
use crate::types::ActionChunk;

pub const ENCODER_DEPTH: usize = 3;
pub const DECODER_DEPTH: usize = 6;

/// `σ` is clamped to `[1e-8, 1e3]`, i.e. log-variance to `[2 ln 1e-8, 2 ln 1e3]`.
pub const SIGMA_MIN: f64 = 1e-8;
pub const SIGMA_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AtaError {
    #[error("chunk has shape {got_h}x{got_d}, model expects {h}x{d}")]
    ChunkShape { got_h: usize, got_d: usize, h: usize, d: usize },
    #[error("latent has width {got}, model expects {expected}")]
    LatentShape { got: usize, expected: usize },
    #[error("condition batch has {got} rows for {expected} samples")]
    BatchSize { got: usize, expected: usize },
    #[error("condition features have width {got}, model expects {expected}")]
    FeatureShape { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtaShape {
    pub horizon: usize,
    pub action_dim: usize,
    pub d_z: usize,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    pub dims: TransformerDims,
    pub conditioning: AtaConditioning,
}

impl AtaShape {
    pub fn from_config(cfg: &RunConfig, feature_dim: usize) -> Self {
        Self {
            horizon: cfg.horizon,
            action_dim: cfg.action_dim,
            d_z: cfg.d_z,
            feature_dim,
            proprio_dim: cfg.proprio_dim,
            dims: cfg.dims(),
            conditioning: cfg.ata_conditioning,
        }
    }

    fn uses_obs(&self) -> bool {
        self.conditioning != AtaConditioning::None
    }

    fn uses_text(&self) -> bool {
        self.conditioning == AtaConditioning::ObsText
    }

    /// Condition tokens shared by the encoder input and the decoder memory.
    fn cond_tokens(&self) -> usize {
        self.uses_obs() as usize + self.uses_text() as usize
    }
}

/// Parameter handles; the tensors themselves live in [`AtaModel::params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtaArch {
    pub shape: AtaShape,
    pub obs: ObsEncoder,
    pub text_in: Option<Linear>,
    pub action_in: Linear,
    pub cls: ParamId,
    pub encoder: TransformerEncoder,
    pub latent_head: Linear,
    pub z_in: Linear,
    pub decoder: TransformerDecoder,
    pub action_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtaModel {
    pub params: ParamSet,
    pub arch: AtaArch,
}

/// Graph handles produced by [`AtaModel::loss_graph`].
#[derive(Debug, Clone, Copy)]
pub struct AtaLossVars {
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    /// Image-feature input; gradients here measure observation dependence.
    pub features: Var,
    /// Instruction-feature input; gradients here measure task dependence.
    pub text: Var,
}

/// Per-batch posterior parameters, `B × d_z` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

struct CondVars {
    features: Var,
    text: Var,
    /// Condition tokens in sample-major order, `cond_tokens` per sample.
    tokens: Option<Var>,
}

/// Fixed sinusoidal embeddings for positions `0 .. h`, one row each.
pub fn position_table(h: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(h, d);
    for i in 0..h {
        let e = sinusoidal_embedding(i as f64, d).expect("d_model is even");
        t.row_mut(i).copy_from_slice(&e);
    }
    t
}

/// Stacks chunks into a `B·h × d_a` tensor plus the matching loss mask.
pub fn stack_chunks(chunks: &[ActionChunk]) -> (Tensor, Tensor) {
    let h = chunks[0].horizon;
    let d = chunks[0].action_dim;
    let mut values = Vec::with_capacity(chunks.len() * h * d);
    let mut mask = Vec::with_capacity(chunks.len() * h * d);
    for c in chunks {
        values.extend_from_slice(&c.values);
        mask.extend(c.loss_mask());
    }
    (Tensor::from_vec(chunks.len() * h, d, values), Tensor::from_vec(chunks.len() * h, d, mask))
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`, summed over dimensions and averaged over rows.
pub fn kl_diag_gaussian(mu: &Tensor, sigma: &Tensor) -> f64 {
    assert_eq!(mu.shape(), sigma.shape());
    let mut total = 0.0;
    for (m, s) in mu.data.iter().zip(&sigma.data) {
        let var = s * s;
        total += 0.5 * (m * m + var - 1.0 - var.ln());
    }
    total / mu.rows as f64
}

/// `z = μ + σ ⊙ ε` with `ε` drawn from `rng`; `σ` is floored at [`SIGMA_MIN`].
pub fn reparameterize(mu: &[f64], sigma: &[f64], rng: &mut RngStream) -> Vec<f64> {
    mu.iter().zip(sigma).map(|(m, s)| m + s.max(SIGMA_MIN) * normal(rng)).collect()
}

impl AtaModel {
    pub fn new(shape: AtaShape, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "ata/init");
        let mut ps = ParamSet::new();
        let d = shape.dims.d_model;
        assert!(d.is_multiple_of(2), "d_model must be even for sinusoidal positions");
        let obs = ObsEncoder::new(&mut ps, "ata.obs", shape.feature_dim, shape.proprio_dim, d, &mut rng);
        let text_in = shape.uses_text().then(|| Linear::new(&mut ps, "ata.text_in", d, d, &mut rng));
        let action_in = Linear::new(&mut ps, "ata.action_in", shape.action_dim, d, &mut rng);
        let cls = nn::embedding(&mut ps, "ata.cls", 1, d, 0.5, &mut rng);
        let encoder = TransformerEncoder::new(&mut ps, "ata.encoder", ENCODER_DEPTH, shape.dims, &mut rng);
        let latent_head = Linear::new(&mut ps, "ata.latent_head", d, 2 * shape.d_z, &mut rng);
        let z_in = Linear::new(&mut ps, "ata.z_in", shape.d_z, d, &mut rng);
        let decoder = TransformerDecoder::new(&mut ps, "ata.decoder", DECODER_DEPTH, shape.dims, &mut rng);
        let action_out = Linear::new(&mut ps, "ata.action_out", d, shape.action_dim, &mut rng);
        let arch = AtaArch { shape, obs, text_in, action_in, cls, encoder, latent_head, z_in, decoder, action_out };
        let model = Self { params: ps, arch };
        model.assert_structure();
        model
    }

    pub fn from_parts(params: ParamSet, arch: AtaArch) -> Self {
        let model = Self { params, arch };
        model.assert_structure();
        model
    }

    fn assert_structure(&self) {
        let a = &self.arch;
        assert_eq!(a.encoder.depth(), ENCODER_DEPTH, "action encoder depth");
        assert_eq!(a.decoder.depth(), DECODER_DEPTH, "action decoder depth");
        assert_eq!(a.latent_head.out_dim, 2 * a.shape.d_z, "latent head width");
    }

    pub fn shape(&self) -> &AtaShape {
        &self.arch.shape
    }

    fn check_cond(&self, cond: &ConditionBatch, batch: usize) -> Result<(), AtaError> {
        if cond.len() != batch {
            return Err(AtaError::BatchSize { got: cond.len(), expected: batch });
        }
        if cond.features.cols != self.arch.shape.feature_dim {
            return Err(AtaError::FeatureShape { got: cond.features.cols, expected: self.arch.shape.feature_dim });
        }
        Ok(())
    }

    fn check_chunks(&self, chunks: &[ActionChunk]) -> Result<(), AtaError> {
        let s = &self.arch.shape;
        for c in chunks {
            if c.horizon != s.horizon || c.action_dim != s.action_dim {
                return Err(AtaError::ChunkShape { got_h: c.horizon, got_d: c.action_dim, h: s.horizon, d: s.action_dim });
            }
        }
        Ok(())
    }

    fn cond_vars(&self, g: &mut Graph, cond: &ConditionBatch) -> CondVars {
        let features = g.input(cond.features.clone());
        let text = g.input(cond.text.clone());
        let s = &self.arch.shape;
        let mut groups = Vec::new();
        if s.uses_obs() {
            groups.push(self.arch.obs.forward(g, features, &cond.proprio));
        }
        if let Some(t) = &self.arch.text_in {
            groups.push(t.forward(g, text));
        }
        let tokens = match groups.len() {
            0 => None,
            1 => Some(groups[0]),
            n => {
                let all = g.concat_rows(&groups);
                Some(g.gather_rows(all, interleave_index(cond.len(), &vec![1; n])))
            }
        };
        CondVars { features, text, tokens }
    }

    /// Returns `(μ, clamped log-variance)` variables, each `B × d_z`.
    fn encode_graph(&self, g: &mut Graph, actions: Var, cond: &CondVars, batch: usize) -> (Var, Var) {
        let s = &self.arch.shape;
        let h = s.horizon;
        let d = s.dims.d_model;
        let a = self.arch.action_in.forward(g, actions);
        let pos = g.input(position_table(h, d));
        let pos = g.gather_rows(pos, tile_index(batch, h));
        let a = g.add(a, pos);
        let cls = g.param(self.arch.cls);
        let cls = g.gather_rows(cls, vec![0; batch]);
        let nc = s.cond_tokens();
        let (seq, len) = match cond.tokens {
            Some(c) => {
                let all = g.concat_rows(&[cls, c, a]);
                (g.gather_rows(all, interleave_index(batch, &[1, nc, h])), 1 + nc + h)
            }
            None => {
                let all = g.concat_rows(&[cls, a]);
                (g.gather_rows(all, interleave_index(batch, &[1, h])), 1 + h)
            }
        };
        let enc = self.arch.encoder.forward(g, seq, batch, len);
        let feat = g.gather_rows(enc, token_rows(batch, len, 0));
        let head = self.arch.latent_head.forward(g, feat);
        let mu = g.slice_cols(head, 0, s.d_z);
        let logvar = g.slice_cols(head, s.d_z, 2 * s.d_z);
        let logvar = g.clamp(logvar, 2.0 * SIGMA_MIN.ln(), 2.0 * SIGMA_MAX.ln());
        (mu, logvar)
    }

    /// Decoded actions as a `B·h × d_a` variable in `[-1, 1]`.
    fn decode_graph(&self, g: &mut Graph, z: Var, cond: &CondVars, batch: usize) -> Var {
        let s = &self.arch.shape;
        let h = s.horizon;
        let zt = self.arch.z_in.forward(g, z);
        let (mem, lm) = match cond.tokens {
            Some(c) => {
                let nc = s.cond_tokens();
                let all = g.concat_rows(&[c, zt]);
                (g.gather_rows(all, interleave_index(batch, &[nc, 1])), nc + 1)
            }
            None => (zt, 1),
        };
        let q = g.input(position_table(h, s.dims.d_model));
        let q = g.gather_rows(q, tile_index(batch, h));
        let out = self.arch.decoder.forward(g, q, mem, batch, h, lm);
        let out = self.arch.action_out.forward(g, out);
        g.tanh(out)
    }

    /// Posterior mean and standard deviation for each chunk.
    pub fn encode(&self, chunks: &[ActionChunk], cond: &ConditionBatch) -> Result<Posterior, AtaError> {
        self.check_chunks(chunks)?;
        self.check_cond(cond, chunks.len())?;
        let mut g = Graph::new(&self.params);
        let cv = self.cond_vars(&mut g, cond);
        let (x, _) = stack_chunks(chunks);
        let x = g.input(x);
        let (mu, lv) = self.encode_graph(&mut g, x, &cv, chunks.len());
        let sigma = g.value(lv).map(|v| (0.5 * v).exp());
        Ok(Posterior { mu: g.value(mu).clone(), sigma })
    }

    /// Decodes `B × d_z` latents into chunks (all steps real).
    pub fn decode(&self, z: &Tensor, cond: &ConditionBatch) -> Result<Vec<ActionChunk>, AtaError> {
        let s = &self.arch.shape;
        if z.cols != s.d_z {
            return Err(AtaError::LatentShape { got: z.cols, expected: s.d_z });
        }
        self.check_cond(cond, z.rows)?;
        let mut g = Graph::new(&self.params);
        let cv = self.cond_vars(&mut g, cond);
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, zv, &cv, z.rows);
        let out = g.value(out);
        let per = s.horizon * s.action_dim;
        Ok((0..z.rows)
            .map(|b| {
                ActionChunk::dense(out.data[b * per..(b + 1) * per].to_vec(), s.horizon, s.action_dim)
                    .expect("decoder output matches model shape")
            })
            .collect())
    }

    /// Builds `masked MSE(a, â) + w · KL` with `z = μ + σ ⊙ noise`.
    ///
    /// `noise` is `B × d_z`; passing it explicitly keeps the loss a deterministic
    /// function of the parameters.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        chunks: &[ActionChunk],
        cond: &ConditionBatch,
        kl_weight: f64,
        noise: &Tensor,
    ) -> Result<AtaLossVars, AtaError> {
        self.check_chunks(chunks)?;
        self.check_cond(cond, chunks.len())?;
        let s = &self.arch.shape;
        let batch = chunks.len();
        assert_eq!(noise.shape(), (batch, s.d_z), "noise shape");
        let cv = self.cond_vars(g, cond);
        let (x, mask) = stack_chunks(chunks);
        let denom: f64 = mask.sum().max(1.0);
        let target = g.input(x);
        let (mu, logvar) = self.encode_graph(g, target, &cv, batch);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let eps_std = g.mul_const(std, noise.clone());
        let z = g.add(mu, eps_std);
        let recon_out = self.decode_graph(g, z, &cv, batch);
        let diff = g.sub(recon_out, target);
        let sq = g.square(diff);
        let sq = g.mul_const(sq, mask);
        let sq = g.sum(sq);
        let recon = g.scale(sq, 1.0 / denom);

        let mu2 = g.square(mu);
        let var = g.exp(logvar);
        let t = g.add(mu2, var);
        let t = g.sub(t, logvar);
        let t = g.sum(t);
        let t = g.scale(t, 0.5 / batch as f64);
        let offset = g.input(Tensor::scalar(-0.5 * s.d_z as f64));
        let kl = g.add(t, offset);

        let wkl = g.scale(kl, kl_weight);
        let loss = g.add(recon, wkl);
        Ok(AtaLossVars { loss, recon, kl, features: cv.features, text: cv.text })
    }

    /// Loss value and its two components, drawing reparameterization noise from `rng`.
    pub fn loss(
        &self,
        chunks: &[ActionChunk],
        cond: &ConditionBatch,
        kl_weight: f64,
        rng: &mut RngStream,
    ) -> Result<AtaLossParts, AtaError> {
        let noise = normal_tensor(rng, chunks.len(), self.arch.shape.d_z);
        let mut g = Graph::new(&self.params);
        let v = self.loss_graph(&mut g, chunks, cond, kl_weight, &noise)?;
        Ok(AtaLossParts { loss: g.value(v.loss).item(), recon: g.value(v.recon).item(), kl: g.value(v.kl).item() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtaLossParts {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ProprioBatch;

    fn tiny(conditioning: AtaConditioning) -> AtaModel {
        AtaModel::new(
            AtaShape {
                horizon: 4,
                action_dim: 3,
                d_z: 4,
                feature_dim: 6,
                proprio_dim: 2,
                dims: TransformerDims { d_model: 8, heads: 2, ff_dim: 16 },
                conditioning,
            },
            1,
        )
    }

    fn batch(n: usize, seed: u64) -> (Vec<ActionChunk>, ConditionBatch) {
        let mut rng = seeded_rng(seed, "ata-test");
        let chunks = (0..n)
            .map(|_| {
                let v = (0..12).map(|_| (0.5 * normal(&mut rng)).tanh()).collect();
                ActionChunk::new(v, 4, 3, vec![true, true, true, false], vec![true, true, false]).unwrap()
            })
            .collect();
        let cond = ConditionBatch {
            features: normal_tensor(&mut rng, n, 6),
            proprio: ProprioBatch::absent(n, 2),
            text: normal_tensor(&mut rng, n, 8),
        };
        (chunks, cond)
    }

    #[test]
    fn construction_fixes_depths_and_head_width() {
        let m = tiny(AtaConditioning::Obs);
        assert_eq!(m.arch.encoder.depth(), 3);
        assert_eq!(m.arch.decoder.depth(), 6);
        assert_eq!(m.arch.latent_head.out_dim, 8);
    }

    #[test]
    fn encode_is_deterministic_with_positive_sigma() {
        let m = tiny(AtaConditioning::Obs);
        let (chunks, cond) = batch(3, 2);
        let a = m.encode(&chunks, &cond).unwrap();
        let b = m.encode(&chunks, &cond).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma.data.iter().all(|s| s.is_finite() && *s > 0.0));
    }

    #[test]
    fn decode_shape_and_range() {
        let m = tiny(AtaConditioning::Obs);
        let (_, cond) = batch(2, 3);
        let z = Tensor::from_vec(2, 4, vec![5.0, -3.0, 0.1, 2.0, -8.0, 4.0, 1.0, 0.0]);
        let out = m.decode(&z, &cond).unwrap();
        assert_eq!(out.len(), 2);
        for c in &out {
            assert_eq!((c.horizon, c.action_dim), (4, 3));
            assert!(c.in_unit_range());
        }
        assert!(matches!(m.decode(&Tensor::zeros(2, 3), &cond), Err(AtaError::LatentShape { .. })));
    }

    #[test]
    fn zero_kl_weight_isolates_reconstruction() {
        let m = tiny(AtaConditioning::Obs);
        let (chunks, cond) = batch(3, 4);
        let noise = Tensor::zeros(3, 4);
        let mut g = Graph::new(&m.params);
        let v = m.loss_graph(&mut g, &chunks, &cond, 0.0, &noise).unwrap();
        assert_eq!(g.value(v.loss).item(), g.value(v.recon).item());
    }

    #[test]
    fn kl_closed_form_special_cases() {
        let z = Tensor::zeros(1, 3);
        let one = Tensor::full(1, 3, 1.0);
        assert_eq!(kl_diag_gaussian(&z, &one), 0.0);
        assert!((kl_diag_gaussian(&Tensor::scalar(1.0), &Tensor::scalar(1.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn collapsed_sigma_returns_the_mean() {
        let mut rng = seeded_rng(0, "r");
        let z = reparameterize(&[0.3, -1.0], &[0.0, 1e-8], &mut rng);
        assert!((z[0] - 0.3).abs() < 1e-6 && (z[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn task_agnostic_model_ignores_instruction_features() {
        for (cond_kind, text_used, obs_used) in
            [(AtaConditioning::Obs, false, true), (AtaConditioning::ObsText, true, true), (AtaConditioning::None, false, false)]
        {
            let m = tiny(cond_kind);
            let (chunks, cond) = batch(2, 5);
            let mut g = Graph::new(&m.params);
            let v = m.loss_graph(&mut g, &chunks, &cond, 0.01, &Tensor::zeros(2, 4)).unwrap();
            let grads = g.backward(v.loss);
            let nonzero = |t: Option<&Tensor>| t.is_some_and(|t| t.data.iter().any(|x| *x != 0.0));
            assert_eq!(nonzero(grads.wrt(v.text)), text_used, "{cond_kind:?} text");
            assert_eq!(nonzero(grads.wrt(v.features)), obs_used, "{cond_kind:?} obs");
        }
    }
}
