//! Conditioning features: frozen image and instruction encoders, the trainable
//! observation MLP, and sinusoidal timestep embeddings.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamId, ParamSet, Var};
use crate::nn::{self, Mlp};
use crate::rng::{normal, seeded_rng, RngStream};
use crate::tensor::Tensor;
use crate::types::Image;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("image is {got_h}x{got_w}, encoder expects {expected}x{expected}")]
    ImageSize { got_h: usize, got_w: usize, expected: usize },
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("proprio has width {got}, embodiment declares {expected}")]
    ProprioWidth { got: usize, expected: usize },
    #[error("timestep embedding width {0} must be even and positive")]
    OddDim(usize),
}

const CONV1_CHANNELS: usize = 8;
const CONV1_KERNEL: usize = 4;
const CONV2_CHANNELS: usize = 16;
const CONV2_KERNEL: usize = 2;

/// Frozen colour-opponent filters whose activation-weighted centroids are appended to the grid.
const CHROMA_CHANNELS: usize = 12;
/// Scales the activation mass so a single object gives values of order one.
const CHROMA_MASS_SCALE: f64 = 100.0;

/// Frozen random image encoder: a two-layer strided ReLU convolution with global
/// average pooling, plus 1x1 colour-opponent filters read out as spatial centroids.
///
/// The centroid head keeps object positions linearly readable, which a pooled
/// conv stack alone does not; every weight is drawn once from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    size: usize,
    conv1: Vec<f64>,
    conv2: Vec<f64>,
    chroma: Vec<[f64; 3]>,
}

impl ImageEncoder {
    pub fn new(size: usize, seed: u64) -> Self {
        assert!(size.is_multiple_of(CONV1_KERNEL * CONV2_KERNEL), "image size must be a multiple of 8");
        let mut rng = seeded_rng(seed, "encoders/image");
        let fan1 = (CONV1_KERNEL * CONV1_KERNEL * 3) as f64;
        let fan2 = (CONV2_KERNEL * CONV2_KERNEL * CONV1_CHANNELS) as f64;
        let conv1 =
            (0..CONV1_CHANNELS * CONV1_KERNEL * CONV1_KERNEL * 3).map(|_| normal(&mut rng) * (2.0 / fan1).sqrt()).collect();
        let conv2 = (0..CONV2_CHANNELS * CONV2_KERNEL * CONV2_KERNEL * CONV1_CHANNELS)
            .map(|_| normal(&mut rng) * (2.0 / fan2).sqrt())
            .collect();
        let chroma = (0..CHROMA_CHANNELS)
            .map(|_| {
                let w = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
                let m = (w[0] + w[1] + w[2]) / 3.0;
                let w = [w[0] - m, w[1] - m, w[2] - m];
                let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt().max(1e-12);
                [w[0] / n, w[1] / n, w[2] / n]
            })
            .collect();
        Self { size, conv1, conv2, chroma }
    }

    pub fn input_size(&self) -> usize {
        self.size
    }

    pub fn feature_dim(&self) -> usize {
        CONV2_CHANNELS + 3 * CHROMA_CHANNELS
    }

    pub fn encode(&self, image: &Image) -> Result<Vec<f64>, EncoderError> {
        if image.height != self.size || image.width != self.size {
            return Err(EncoderError::ImageSize { got_h: image.height, got_w: image.width, expected: self.size });
        }
        let s1 = self.size / CONV1_KERNEL;
        let mut h1 = vec![0.0; s1 * s1 * CONV1_CHANNELS];
        let mut patch = [0.0; CONV1_KERNEL * CONV1_KERNEL * 3];
        for py in 0..s1 {
            for px in 0..s1 {
                let mut n = 0;
                for ky in 0..CONV1_KERNEL {
                    for kx in 0..CONV1_KERNEL {
                        for c in 0..3 {
                            patch[n] = image.value(py * CONV1_KERNEL + ky, px * CONV1_KERNEL + kx, c) - 0.5;
                            n += 1;
                        }
                    }
                }
                for oc in 0..CONV1_CHANNELS {
                    let w = &self.conv1[oc * patch.len()..(oc + 1) * patch.len()];
                    let a: f64 = w.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    h1[(py * s1 + px) * CONV1_CHANNELS + oc] = a.max(0.0);
                }
            }
        }
        let s2 = s1 / CONV2_KERNEL;
        let k2 = CONV2_KERNEL * CONV2_KERNEL * CONV1_CHANNELS;
        let mut out = vec![0.0; CONV2_CHANNELS];
        let mut patch2 = vec![0.0; k2];
        for py in 0..s2 {
            for px in 0..s2 {
                let mut n = 0;
                for ky in 0..CONV2_KERNEL {
                    for kx in 0..CONV2_KERNEL {
                        let base = ((py * CONV2_KERNEL + ky) * s1 + px * CONV2_KERNEL + kx) * CONV1_CHANNELS;
                        patch2[n..n + CONV1_CHANNELS].copy_from_slice(&h1[base..base + CONV1_CHANNELS]);
                        n += CONV1_CHANNELS;
                    }
                }
                for oc in 0..CONV2_CHANNELS {
                    let w = &self.conv2[oc * k2..(oc + 1) * k2];
                    let a: f64 = w.iter().zip(&patch2).map(|(a, b)| a * b).sum();
                    out[oc] += a.max(0.0) / (s2 * s2) as f64;
                }
            }
        }
        out.extend(self.chroma_centroids(image));
        Ok(out)
    }

    /// Per filter: activation-weighted `(x, y)` in `[-1, 1]` and the scaled mean activation.
    ///
    /// Filter weights sum to zero, so grey, white and black pixels give no response.
    fn chroma_centroids(&self, image: &Image) -> Vec<f64> {
        let s = self.size;
        let mut acc = vec![[0.0; 3]; self.chroma.len()];
        for y in 0..s {
            for x in 0..s {
                let rgb = [image.value(y, x, 0), image.value(y, x, 1), image.value(y, x, 2)];
                let (u, v) = (2.0 * (x as f64 + 0.5) / s as f64 - 1.0, 2.0 * (y as f64 + 0.5) / s as f64 - 1.0);
                for (w, a) in self.chroma.iter().zip(acc.iter_mut()) {
                    let r = (w[0] * rgb[0] + w[1] * rgb[1] + w[2] * rgb[2]).max(0.0);
                    a[0] += r;
                    a[1] += r * u;
                    a[2] += r * v;
                }
            }
        }
        let mut out = Vec::with_capacity(3 * acc.len());
        for [m, sx, sy] in acc {
            if m > 1e-9 {
                out.extend([sx / m, sy / m]);
            } else {
                out.extend([0.0, 0.0]);
            }
            out.push(CHROMA_MASS_SCALE * m / (s * s) as f64);
        }
        out
    }

    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for x in self.conv1.iter().chain(&self.conv2).chain(self.chroma.iter().flatten()) {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

const INSTRUCTION_BUCKETS: usize = 4096;

/// Hash-bucketed token embeddings, mean-pooled over whitespace tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEncoder {
    dim: usize,
    table: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl InstructionEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "encoders/instruction");
        let table = (0..INSTRUCTION_BUCKETS * dim).map(|_| normal(&mut rng)).collect();
        Self { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_embedding(&self, token: &str) -> &[f64] {
        let mut lower = alloc::string::String::with_capacity(token.len());
        for c in token.chars() {
            lower.extend(c.to_lowercase());
        }
        let bucket = (fnv1a(lower.as_bytes()) % INSTRUCTION_BUCKETS as u64) as usize;
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let mut out = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in text.split_whitespace() {
            for (o, e) in out.iter_mut().zip(self.token_embedding(tok)) {
                *o += e;
            }
            n += 1;
        }
        if n == 0 {
            return Err(EncoderError::EmptyInstruction);
        }
        if n > 1 {
            for o in out.iter_mut() {
                *o /= n as f64;
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for x in &self.table {
            h.update(x.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Interleaved `[sin, cos]` pairs over geometric frequencies `10000^(-2i/dim)`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>, EncoderError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(EncoderError::OddDim(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

/// A batch of proprioception vectors, each present or absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ProprioBatch {
    pub values: Tensor,
    pub present: Vec<bool>,
}

impl ProprioBatch {
    pub fn new(rows: &[Option<&[f64]>], width: usize) -> Result<Self, EncoderError> {
        let mut values = Tensor::zeros(rows.len(), width);
        let mut present = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            match r {
                Some(p) => {
                    if p.len() != width {
                        return Err(EncoderError::ProprioWidth { got: p.len(), expected: width });
                    }
                    values.row_mut(i).copy_from_slice(p);
                    present.push(true);
                }
                None => present.push(false),
            }
        }
        Ok(Self { values, present })
    }

    pub fn absent(batch: usize, width: usize) -> Self {
        Self { values: Tensor::zeros(batch, width), present: vec![false; batch] }
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }
}

/// `f_obs = MLP(concat(image feature, state))`, with a learned stand-in for absent state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObsEncoder {
    pub mlp: Mlp,
    pub placeholder: ParamId,
    pub feature_dim: usize,
    pub proprio_dim: usize,
}

impl ObsEncoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        feature_dim: usize,
        proprio_dim: usize,
        d_model: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mlp = Mlp::new(ps, &alloc::format!("{name}.mlp"), &[feature_dim + proprio_dim, d_model, d_model, d_model], rng);
        let placeholder = nn::embedding(ps, &alloc::format!("{name}.absent_state"), 1, proprio_dim.max(1), 0.5, rng);
        Self { mlp, placeholder, feature_dim, proprio_dim }
    }

    /// `features` is a `B × feature_dim` variable so callers can probe gradients reaching it.
    pub fn forward(&self, g: &mut Graph, features: Var, proprio: &ProprioBatch) -> Var {
        let b = proprio.len();
        assert_eq!(g.shape(features), (b, self.feature_dim), "obs encoder: feature batch shape");
        if self.proprio_dim == 0 {
            return self.mlp.forward(g, features);
        }
        let mut absent = Tensor::zeros(b, self.proprio_dim);
        for (i, &p) in proprio.present.iter().enumerate() {
            if !p {
                absent.row_mut(i).iter_mut().for_each(|x| *x = 1.0);
            }
        }
        let ph = g.param(self.placeholder);
        let ph = g.gather_rows(ph, vec![0; b]);
        let ph = g.mul_const(ph, absent);
        let given = g.input(proprio.values.clone());
        let state = g.add(given, ph);
        let x = g.concat_cols(&[features, state]);
        self.mlp.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_zero_is_sin_zero_cos_one() {
        let e = sinusoidal_embedding(0.0, 16).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(sinusoidal_embedding(3.0, 7), Err(EncoderError::OddDim(7)));
    }

    #[test]
    fn timestep_embeddings_are_injective_on_the_schedule_range() {
        let embs: Vec<Vec<f64>> = (0..=1000).map(|t| sinusoidal_embedding(t as f64, 32).unwrap()).collect();
        for e in &embs {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn instruction_whitespace_and_singletons() {
        let enc = InstructionEncoder::new(16, 3);
        assert_eq!(enc.encode("press button").unwrap(), enc.encode("press  button").unwrap());
        assert_eq!(enc.encode("push").unwrap(), enc.token_embedding("push").to_vec());
        assert_ne!(enc.encode("push block").unwrap(), enc.encode("open drawer").unwrap());
        assert_eq!(enc.encode("  "), Err(EncoderError::EmptyInstruction));
    }

    #[test]
    fn image_encoder_is_frozen_and_non_degenerate() {
        let enc = ImageEncoder::new(16, 9);
        let zeros = Image::filled(16, 16, [0, 0, 0]);
        let ones = Image::filled(16, 16, [255, 255, 255]);
        let a = enc.encode(&zeros).unwrap();
        assert_eq!(a, enc.encode(&zeros).unwrap());
        assert_ne!(a, enc.encode(&ones).unwrap());
        assert_eq!(a.len(), enc.feature_dim());
        let mut rng = seeded_rng(1, "img");
        let mut img = Image::filled(16, 16, [0, 0, 0]);
        for v in img.data.iter_mut() {
            *v = (normal(&mut rng).abs() * 80.0).min(255.0) as u8;
        }
        let f = enc.encode(&img).unwrap();
        let n: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n.is_finite() && n > 0.0);
        assert!(matches!(enc.encode(&Image::filled(8, 16, [0, 0, 0])), Err(EncoderError::ImageSize { .. })));
    }

    #[test]
    fn proprio_width_is_checked() {
        let p = [1.0, 2.0];
        assert!(matches!(ProprioBatch::new(&[Some(&p)], 3), Err(EncoderError::ProprioWidth { got: 2, expected: 3 })));
    }
}

/// Raw per-sample conditions for a batch: frozen image features, state, and instruction features.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBatch {
    /// `B × feature_dim` output of [`ImageEncoder`].
    pub features: Tensor,
    pub proprio: ProprioBatch,
    /// `B × d_model` output of [`InstructionEncoder`].
    pub text: Tensor,
}

impl ConditionBatch {
    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let mut out = Tensor::zeros(rows.len(), t.cols);
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(t.row(r));
            }
            out
        };
        Self {
            features: pick(&self.features),
            proprio: ProprioBatch {
                values: pick(&self.proprio.values),
                present: rows.iter().map(|&r| self.proprio.present[r]).collect(),
            },
            text: pick(&self.text),
        }
    }
}
