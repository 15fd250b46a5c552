//! AdamW and the warmup-then-cosine learning-rate schedule.

use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::tensor::Tensor;

/// Linear warmup to `peak` over `warmup` updates, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    /// Learning rate for the `step`-th update (1-based).
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.peak;
        }
        let progress = (step.min(self.total) - self.warmup) as f64 / (self.total - self.warmup) as f64;
        0.5 * self.peak * (1.0 + (core::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip applied before the update; non-positive disables clipping.
    pub grad_clip: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64, grad_clip: f64) -> Self {
        let zeros = |ps: &ParamSet| ps.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, grad_clip, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamSet, grads: &mut [Tensor], lr: f64) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if self.grad_clip > 0.0 && norm > self.grad_clip {
            let s = self.grad_clip / norm;
            for g in grads.iter_mut() {
                for x in g.data.iter_mut() {
                    *x *= s;
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
        norm
    }
}
