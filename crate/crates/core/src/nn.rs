//! Layers assembled from [`Graph`] operations.

use alloc::format;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamSet, Var};
use crate::rng::{normal, RngStream};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Width parameters shared by every transformer stack in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

fn uniform(rng: &mut RngStream, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// A `rows × cols` parameter drawn from N(0, std²).
pub fn embedding(ps: &mut ParamSet, name: &str, rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> ParamId {
    let t = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| std * normal(rng)).collect());
    ps.add(name, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, in_dim, out_dim, bound));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// Affine layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, widths: &[usize], rng: &mut RngStream) -> Self {
        assert!(widths.len() >= 2);
        let layers =
            widths.windows(2).enumerate().map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = g.gelu(x);
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, name: &str, dims: TransformerDims, rng: &mut RngStream) -> Self {
        let d = dims.d_model;
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            heads: dims.heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mem: Var, batch: usize, lq: usize, lk: usize) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, mem);
        let v = self.v.forward(g, mem);
        let a = g.attention(q, k, v, batch, lq, lk, self.heads);
        self.o.forward(g, a)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderBlock {
    pub fn new(ps: &mut ParamSet, name: &str, dims: TransformerDims, rng: &mut RngStream) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dims.d_model),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dims, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dims.d_model),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dims.d_model, dims.ff_dim, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), dims.ff_dim, dims.d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, batch, len, len);
        let x = g.add(x, a);
        feed_forward(g, x, &self.ln2, &self.ff1, &self.ff2)
    }
}

fn feed_forward(g: &mut Graph, x: Var, ln: &LayerNorm, ff1: &Linear, ff2: &Linear) -> Var {
    let h = ln.forward(g, x);
    let h = ff1.forward(g, h);
    let h = g.gelu(h);
    let h = ff2.forward(g, h);
    g.add(x, h)
}

/// Pre-norm block with self-attention over queries and cross-attention into a memory sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamSet, name: &str, dims: TransformerDims, rng: &mut RngStream) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dims.d_model),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self"), dims, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dims.d_model),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross"), dims, rng),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dims.d_model),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dims.d_model, dims.ff_dim, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), dims.ff_dim, dims.d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mem: Var, batch: usize, lq: usize, lm: usize) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, batch, lq, lq);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, mem, batch, lq, lm);
        let x = g.add(x, c);
        feed_forward(g, x, &self.ln3, &self.ff1, &self.ff2)
    }
}

/// Stack of [`EncoderBlock`]s followed by a final layer norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(ps: &mut ParamSet, name: &str, depth: usize, dims: TransformerDims, rng: &mut RngStream) -> Self {
        let blocks = (0..depth).map(|i| EncoderBlock::new(ps, &format!("{name}.{i}"), dims, rng)).collect();
        Self { blocks, norm: LayerNorm::new(ps, &format!("{name}.norm"), dims.d_model) }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, batch: usize, len: usize) -> Var {
        for b in &self.blocks {
            x = b.forward(g, x, batch, len);
        }
        self.norm.forward(g, x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDecoder {
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
}

impl TransformerDecoder {
    pub fn new(ps: &mut ParamSet, name: &str, depth: usize, dims: TransformerDims, rng: &mut RngStream) -> Self {
        let blocks = (0..depth).map(|i| DecoderBlock::new(ps, &format!("{name}.{i}"), dims, rng)).collect();
        Self { blocks, norm: LayerNorm::new(ps, &format!("{name}.norm"), dims.d_model) }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, mem: Var, batch: usize, lq: usize, lm: usize) -> Var {
        for b in &self.blocks {
            x = b.forward(g, x, mem, batch, lq, lm);
        }
        self.norm.forward(g, x)
    }
}

/// Row order that interleaves per-sample token groups.
///
/// `groups[i]` is a tensor of `batch * counts[i]` rows laid out sample-major.
/// After `concat_rows` of all groups, gathering with the returned indices yields
/// `batch` contiguous sequences whose tokens follow group order.
pub fn interleave_index(batch: usize, counts: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(counts.len());
    let mut acc = 0;
    for &c in counts {
        offsets.push(acc);
        acc += batch * c;
    }
    let per = counts.iter().sum::<usize>();
    let mut idx = Vec::with_capacity(batch * per);
    for b in 0..batch {
        for (gi, &c) in counts.iter().enumerate() {
            for t in 0..c {
                idx.push(offsets[gi] + b * c + t);
            }
        }
    }
    idx
}

/// Picks row `pos` of every length-`len` sequence in a `batch·len`-row tensor.
pub fn token_rows(batch: usize, len: usize, pos: usize) -> Vec<usize> {
    (0..batch).map(|b| b * len + pos).collect()
}

/// Indices that tile `rows` distinct rows `batch` times (broadcasting learned tokens).
pub fn tile_index(batch: usize, rows: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..rows).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleave_orders_tokens_per_sample() {
        // two samples, group A has 1 token each, group B 2 tokens each
        let idx = interleave_index(2, &[1, 2]);
        // concat rows: A0 A1 B00 B01 B10 B11 -> sample0: A0 B00 B01, sample1: A1 B10 B11
        assert_eq!(idx, alloc::vec![0, 2, 3, 1, 4, 5]);
        assert_eq!(token_rows(3, 4, 1), alloc::vec![1, 5, 9]);
        assert_eq!(tile_index(2, 3), alloc::vec![0, 1, 2, 0, 1, 2]);
    }
}
