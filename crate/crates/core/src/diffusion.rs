//! Variance schedules, the closed-form forward process, and DDPM / DDIM reverse steps.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the most.
//! `ᾱ_0 = 1` by convention so a DDIM jump to `t_prev = 0` returns the clean estimate.

use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::config::{SamplerKind, ScheduleKind};
use crate::rng::{normal, RngStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={max}")]
    TimestepRange { t: usize, max: usize },
    #[error("ddpm step needs t >= 1")]
    ZeroStep,
    #[error("ddim step needs t_prev < t (got t={t}, t_prev={t_prev})")]
    Ordering { t: usize, t_prev: usize },
    #[error("sampler asks for {steps} steps but the schedule has {max}")]
    TooManySteps { steps: usize, max: usize },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("beta range [{start}, {end}] must lie in (0, 1)")]
    BetaRange { start: f64, end: f64 },
}

/// Bound on DDIM's intermediate clean estimates (targets are normalized or KL-regularized latents).
pub const X0_CLIP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::EmptySchedule);
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(DiffusionError::BetaRange { start: beta_start, end: beta_end });
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => alloc::vec![beta_start],
            ScheduleKind::Linear => {
                (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// DDPM defaults: linear β from 1e-4 to 2e-2.
    pub fn linear(steps: usize) -> Result<Self, DiffusionError> {
        Self::new(steps, ScheduleKind::Linear, 1e-4, 2e-2)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::TimestepRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
    pub fn forward_noise(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check(t)?;
        assert_eq!(z0.len(), eps.len());
        let ab = self.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }

    /// Ancestral DDPM step with explicit noise `zeta` (ignored at `t = 1`).
    ///
    /// Written as the posterior mean given a clean estimate, which is clamped to
    /// `±X0_CLIP` as in [`ddim_step`](Self::ddim_step); unclamped it equals
    /// the usual `(z_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t`.
    pub fn ddpm_step_with_noise(&self, z: &[f64], t: usize, eps_hat: &[f64], zeta: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        if t == 0 {
            return Err(DiffusionError::ZeroStep);
        }
        self.check(t)?;
        let beta = self.beta_at(t);
        let ab = self.alpha_bar_at(t);
        let abp = self.alpha_bar_at(t - 1);
        let c0 = abp.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha_at(t).sqrt() * (1.0 - abp) / (1.0 - ab);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
        Ok(z.iter()
            .zip(eps_hat)
            .zip(zeta)
            .map(|((z, e), n)| {
                let z0 = ((z - sb * e) / sa).clamp(-X0_CLIP, X0_CLIP);
                c0 * z0 + ct * z + sigma * n
            })
            .collect())
    }

    /// `z_{t-1} = (z_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t + √β_t · ζ`, no noise at `t = 1`.
    pub fn ddpm_step(&self, z: &[f64], t: usize, eps_hat: &[f64], rng: &mut RngStream) -> Result<Vec<f64>, DiffusionError> {
        if t == 0 {
            return Err(DiffusionError::ZeroStep);
        }
        let zeta: Vec<f64> = if t > 1 { (0..z.len()).map(|_| normal(rng)).collect() } else { alloc::vec![0.0; z.len()] };
        self.ddpm_step_with_noise(z, t, eps_hat, &zeta)
    }

    /// Deterministic (η = 0) DDIM jump from `t` to `t_prev`.
    ///
    /// The clean estimate is clamped to `±X0_CLIP` before re-noising: at
    /// `t = T` the division by `√ᾱ_T` turns a small noise-prediction error into a
    /// large jump, and one unclamped jump is enough to leave the training range.
    pub fn ddim_step(&self, z: &[f64], t: usize, t_prev: usize, eps_hat: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check(t)?;
        if t_prev >= t {
            return Err(DiffusionError::Ordering { t, t_prev });
        }
        let ab = self.alpha_bar_at(t);
        let abp = self.alpha_bar_at(t_prev);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (abp.sqrt(), (1.0 - abp).sqrt());
        Ok(z.iter()
            .zip(eps_hat)
            .map(|(z, e)| {
                let z0 = ((z - sb * e) / sa).clamp(-X0_CLIP, X0_CLIP);
                pa * z0 + pb * e
            })
            .collect())
    }
}

/// A reverse-process sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize },
}

impl Sampler {
    pub fn from_kind(kind: SamplerKind, steps: usize) -> Self {
        match kind {
            SamplerKind::Ddpm => Sampler::Ddpm,
            SamplerKind::Ddim => Sampler::Ddim { steps },
        }
    }

    pub fn label(&self) -> alloc::string::String {
        match self {
            Sampler::Ddpm => "ddpm".into(),
            Sampler::Ddim { steps } => alloc::format!("ddim{steps}"),
        }
    }

    /// Descending timesteps at which the noise predictor is evaluated.
    pub fn timesteps(&self, total: usize) -> Result<Vec<usize>, DiffusionError> {
        match *self {
            Sampler::Ddpm => Ok((1..=total).rev().collect()),
            Sampler::Ddim { steps } => ddim_timesteps(total, steps),
        }
    }
}

/// `steps` uniformly spaced timesteps in `1..=total`, descending, containing `total` and (for
/// `steps >= 2`) `1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || total == 0 {
        return Err(DiffusionError::EmptySchedule);
    }
    if steps > total {
        return Err(DiffusionError::TooManySteps { steps, max: total });
    }
    if steps == 1 {
        return Ok(alloc::vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    let mut ts: Vec<usize> = (0..steps).map(|i| 1 + (i as f64 * span).round() as usize).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Anything that predicts the noise in a batch of noisy samples.
pub trait NoisePredictor {
    /// `z` is `B × W`, every row at timestep `t`; returns `B × W`.
    fn predict(&self, z: &Tensor, t: usize) -> Tensor;
}

impl<F: Fn(&Tensor, usize) -> Tensor> NoisePredictor for F {
    fn predict(&self, z: &Tensor, t: usize) -> Tensor {
        self(z, t)
    }
}

/// Runs the reverse process from `z_T ~ N(0, I)` and returns the `z_0` estimate.
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    rows: usize,
    width: usize,
    rng: &mut RngStream,
) -> Result<Tensor, DiffusionError> {
    let ts = sampler.timesteps(schedule.steps())?;
    let mut z = crate::rng::normal_tensor(rng, rows, width);
    for (i, &t) in ts.iter().enumerate() {
        let eps = predictor.predict(&z, t);
        let next = match sampler {
            Sampler::Ddpm => schedule.ddpm_step(&z.data, t, &eps.data, rng)?,
            Sampler::Ddim { .. } => {
                let t_prev = ts.get(i + 1).copied().unwrap_or(0);
                schedule.ddim_step(&z.data, t, t_prev, &eps.data)?
            }
        };
        z = Tensor::from_vec(rows, width, next);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use core::cell::Cell;

    #[test]
    fn linear_schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.beta[0], 1e-4);
        assert!((s.beta[999] - 2e-2).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[0] >= 0.99);
        assert!(s.alpha_bar[999] <= 0.01);
        let one = NoiseSchedule::linear(1).unwrap();
        assert_eq!(one.alpha_bar, alloc::vec![1.0 - one.beta[0]]);
        assert_eq!(NoiseSchedule::linear(0), Err(DiffusionError::EmptySchedule));
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let z0 = [1.0, -2.0];
        let eps = [0.5, 0.3];
        let near = s.forward_noise(&z0, 1, &eps).unwrap();
        let tol = (1.0 - s.alpha_bar_at(1)).sqrt() * (0.5f64.powi(2) + 0.3f64.powi(2)).sqrt() + 1e-3;
        assert!((near[0] - 1.0).abs() < tol && (near[1] + 2.0).abs() < tol);
        let far = s.forward_noise(&z0, 1000, &eps).unwrap();
        assert!((far[0] - 0.5).abs() < 0.02 && (far[1] - 0.3).abs() < 0.03);
        assert!(s.forward_noise(&z0, 0, &eps).is_err());
        assert!(s.forward_noise(&z0, 1001, &eps).is_err());
    }

    #[test]
    fn ddpm_step_without_noise_or_prediction_rescales() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let z = [0.7, -0.2];
        let out = s.ddpm_step_with_noise(&z, 500, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        for (o, zz) in out.iter().zip(z) {
            assert!((o - zz / s.alpha_at(500).sqrt()).abs() < 1e-15);
        }
        let mut r1 = seeded_rng(1, "a");
        let mut r2 = seeded_rng(2, "b");
        let a = s.ddpm_step(&z, 1, &[0.1, 0.2], &mut r1).unwrap();
        let b = s.ddpm_step(&z, 1, &[0.1, 0.2], &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.ddpm_step(&z, 0, &[0.0, 0.0], &mut r1), Err(DiffusionError::ZeroStep));
    }

    #[test]
    fn ddim_step_inverts_forward_noise_with_true_eps() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let z0 = [0.4, -1.3, 2.0];
        let eps = [1.1, -0.7, 0.2];
        let zt = s.forward_noise(&z0, 800, &eps).unwrap();
        let zp = s.ddim_step(&zt, 800, 350, &eps).unwrap();
        let expect = s.forward_noise(&z0, 350, &eps).unwrap();
        for (a, b) in zp.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.ddim_step(&zt, 800, 350, &eps).unwrap(), zp);
        assert!(matches!(s.ddim_step(&zt, 300, 350, &eps), Err(DiffusionError::Ordering { .. })));
    }

    #[test]
    fn ddim_subsequence_contains_both_ends() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let all = ddim_timesteps(1000, 1000).unwrap();
        assert_eq!(all, (1..=1000).rev().collect::<Vec<_>>());
        assert!(matches!(ddim_timesteps(10, 11), Err(DiffusionError::TooManySteps { .. })));
    }

    #[test]
    fn sampling_cost_is_one_evaluation_per_step() {
        let s = NoiseSchedule::linear(200).unwrap();
        for (sampler, expect) in [(Sampler::Ddpm, 200), (Sampler::Ddim { steps: 25 }, 25)] {
            let calls = Cell::new(0usize);
            let pred = |z: &Tensor, _t: usize| {
                calls.set(calls.get() + 1);
                Tensor::zeros(z.rows, z.cols)
            };
            let mut rng = seeded_rng(3, "count");
            sample(&pred, &s, sampler, 2, 3, &mut rng).unwrap();
            assert_eq!(calls.get(), expect);
        }
    }

    #[test]
    fn ddim_sampling_is_deterministic_given_seed() {
        let s = NoiseSchedule::linear(100).unwrap();
        let pred = |z: &Tensor, _t: usize| z.map(|v| 0.5 * v);
        let run = || sample(&pred, &s, Sampler::Ddim { steps: 10 }, 3, 2, &mut seeded_rng(9, "x")).unwrap();
        assert_eq!(run(), run());
    }
}
