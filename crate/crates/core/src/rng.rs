//! Deterministic, labelled random streams.
//!
//! A stream is identified by `(seed, label)`. The ChaCha key is the SHA-256 of
//! both, so identical pairs reproduce across processes and platforms and any
//! change to either yields an unrelated stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// A single-owner random stream.
pub type RngStream = ChaCha8Rng;

pub fn seeded_rng(seed: u64, label: &str) -> RngStream {
    let mut h = Sha256::new();
    h.update(b"chunkdiff.rng.v1");
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[inline]
pub fn normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_tensor(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect())
}
