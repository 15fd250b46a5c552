//! Central finite differences against the tape's analytic gradients on tiny models.

use chunkdiff_core::ata::{AtaModel, AtaShape};
use chunkdiff_core::autograd::{Graph, ParamSet, Var};
use chunkdiff_core::config::AtaConditioning;
use chunkdiff_core::diffusion::NoiseSchedule;
use chunkdiff_core::encoders::{ConditionBatch, ObsEncoder, ProprioBatch};
use chunkdiff_core::lpg::{DenoiserShape, EpsNet, LatentRegressor, RegressorShape};
use chunkdiff_core::nn::TransformerDims;
use chunkdiff_core::rng::{normal, normal_tensor, seeded_rng};
use chunkdiff_core::tensor::Tensor;
use chunkdiff_core::types::ActionChunk;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Entries probed per parameter tensor.
const PROBES: usize = 6;

const D_MODEL: usize = 16;
const D_Z: usize = 8;
const H: usize = 4;
const D_A: usize = 3;
const FEAT: usize = 10;
const PROPRIO: usize = 3;

fn dims() -> TransformerDims {
    TransformerDims { d_model: D_MODEL, heads: 2, ff_dim: 32 }
}

fn cond(batch: usize, seed: u64) -> ConditionBatch {
    let mut rng = seeded_rng(seed, "grad/cond");
    let p: Vec<Vec<f64>> = (0..batch).map(|_| (0..PROPRIO).map(|_| normal(&mut rng)).collect()).collect();
    // first sample has state, the rest use the placeholder
    let rows: Vec<Option<&[f64]>> = p.iter().enumerate().map(|(i, v)| (i == 0).then_some(v.as_slice())).collect();
    ConditionBatch {
        features: normal_tensor(&mut rng, batch, FEAT).map(f64::abs),
        proprio: ProprioBatch::new(&rows, PROPRIO).unwrap(),
        text: normal_tensor(&mut rng, batch, D_MODEL),
    }
}

fn chunks(batch: usize) -> Vec<ActionChunk> {
    let mut rng = seeded_rng(5, "grad/chunks");
    (0..batch)
        .map(|b| {
            let v = (0..H * D_A).map(|_| normal(&mut rng).tanh()).collect();
            // second chunk has a padded tail step and a padded dimension
            let pad = (0..H).map(|i| b == 0 || i < H - 1).collect();
            let dm = (0..D_A).map(|d| b == 0 || d < D_A - 1).collect();
            ActionChunk::new(v, H, D_A, pad, dm).unwrap()
        })
        .collect()
}

/// Worst per-tensor `‖g_analytic − g_numeric‖ / (‖g_analytic‖ + ‖g_numeric‖)` over probed entries.
fn check(params: &ParamSet, loss: impl Fn(&ParamSet) -> f64, grads: &[Tensor], label: &str) {
    let mut rng = seeded_rng(0, label);
    let mut p = params.clone();
    let mut worst = (0.0, String::new());
    let mut reached = 0;
    for (i, g) in grads.iter().enumerate() {
        let n = g.data.len();
        let probes: Vec<usize> =
            if n <= PROBES { (0..n).collect() } else { (0..PROBES).map(|_| rng.random_range(0..n)).collect() };
        let (mut diff, mut scale) = (0.0, 0.0);
        for j in probes {
            let orig = p.tensors_mut()[i].data[j];
            p.tensors_mut()[i].data[j] = orig + STEP;
            let up = loss(&p);
            p.tensors_mut()[i].data[j] = orig - STEP;
            let down = loss(&p);
            p.tensors_mut()[i].data[j] = orig;
            let num = (up - down) / (2.0 * STEP);
            diff += (g.data[j] - num).powi(2);
            scale += g.data[j].abs() + num.abs();
        }
        if scale < 1e-9 {
            continue;
        }
        reached += 1;
        let rel = diff.sqrt() / scale;
        if rel > worst.0 {
            worst = (rel, params.name(i).to_string());
        }
    }
    assert!(reached > grads.len() / 2, "{label}: only {reached}/{} tensors carry gradient", grads.len());
    assert!(worst.0 < TOL, "{label}: relative error {:.2e} in {}", worst.0, worst.1);
}

fn grads_of(params: &ParamSet, build: impl Fn(&mut Graph) -> Var) -> Vec<Tensor> {
    let mut g = Graph::new(params);
    let l = build(&mut g);
    g.backward(l).into_param_grads(params)
}

#[test]
fn ata_loss_gradients_match_finite_differences() {
    for conditioning in [AtaConditioning::Obs, AtaConditioning::ObsText] {
        let shape = AtaShape {
            horizon: H,
            action_dim: D_A,
            d_z: D_Z,
            feature_dim: FEAT,
            proprio_dim: PROPRIO,
            dims: dims(),
            conditioning,
        };
        let model = AtaModel::new(shape, 3);
        let (ch, c) = (chunks(2), cond(2, 1));
        let noise = normal_tensor(&mut seeded_rng(2, "grad/noise"), 2, D_Z);
        let loss = |ps: &ParamSet| {
            let m = AtaModel::from_parts(ps.clone(), model.arch.clone());
            let mut g = Graph::new(&m.params);
            let v = m.loss_graph(&mut g, &ch, &c, 0.3, &noise).unwrap();
            g.value(v.loss).item()
        };
        let grads = grads_of(&model.params, |g| model.loss_graph(g, &ch, &c, 0.3, &noise).unwrap().loss);
        check(&model.params, loss, &grads, &format!("ata/{conditioning:?}"));
    }
}

#[test]
fn lpg_loss_gradients_match_finite_differences() {
    let shape = DenoiserShape {
        tokens: 1,
        width: D_Z,
        feature_dim: FEAT,
        proprio_dim: PROPRIO,
        dims: dims(),
        layers: 2,
        time_embed_dim: 8,
    };
    let net = EpsNet::new(shape, NoiseSchedule::linear(100).unwrap(), 4, "grad/lpg");
    let mut rng = seeded_rng(6, "grad/lpg-data");
    let z0 = normal_tensor(&mut rng, 2, D_Z);
    let eps = normal_tensor(&mut rng, 2, D_Z);
    let ts = [7, 93];
    let c = cond(2, 8);
    let loss = |ps: &ParamSet| {
        let n = EpsNet { params: ps.clone(), arch: net.arch.clone() };
        let mut g = Graph::new(&n.params);
        let v = n.loss_graph(&mut g, &z0, &c, &ts, &eps).unwrap();
        g.value(v.loss).item()
    };
    let grads = grads_of(&net.params, |g| net.loss_graph(g, &z0, &c, &ts, &eps).unwrap().loss);
    check(&net.params, loss, &grads, "lpg");
}

#[test]
fn trajectory_denoiser_gradients_match_finite_differences() {
    let shape = DenoiserShape {
        tokens: H,
        width: D_A,
        feature_dim: FEAT,
        proprio_dim: PROPRIO,
        dims: dims(),
        layers: 1,
        time_embed_dim: 8,
    };
    let net = EpsNet::new(shape, NoiseSchedule::linear(50).unwrap(), 9, "grad/traj");
    let mut rng = seeded_rng(10, "grad/traj-data");
    let x0 = normal_tensor(&mut rng, 2, H * D_A);
    let eps = normal_tensor(&mut rng, 2, H * D_A);
    let c = cond(2, 11);
    let loss = |ps: &ParamSet| {
        let n = EpsNet { params: ps.clone(), arch: net.arch.clone() };
        let mut g = Graph::new(&n.params);
        let v = n.loss_graph(&mut g, &x0, &c, &[1, 50], &eps).unwrap();
        g.value(v.loss).item()
    };
    let grads = grads_of(&net.params, |g| net.loss_graph(g, &x0, &c, &[1, 50], &eps).unwrap().loss);
    check(&net.params, loss, &grads, "trajectory");
}

#[test]
fn regressor_gradients_match_finite_differences() {
    let shape = RegressorShape { width: D_Z, feature_dim: FEAT, proprio_dim: PROPRIO, dims: dims(), layers: 2 };
    let reg = LatentRegressor::new(shape, 12);
    let target = normal_tensor(&mut seeded_rng(13, "grad/reg"), 2, D_Z);
    let c = cond(2, 14);
    let loss = |ps: &ParamSet| {
        let r = LatentRegressor { params: ps.clone(), arch: reg.arch.clone() };
        let mut g = Graph::new(&r.params);
        let v = r.loss_graph(&mut g, &target, &c).unwrap();
        g.value(v.loss).item()
    };
    let grads = grads_of(&reg.params, |g| reg.loss_graph(g, &target, &c).unwrap().loss);
    check(&reg.params, loss, &grads, "regressor");
}

#[test]
fn obs_encoder_gradients_match_finite_differences_on_one_sample() {
    for with_state in [true, false] {
        let mut ps = ParamSet::new();
        let mut rng = seeded_rng(15, "grad/obs");
        let enc = ObsEncoder::new(&mut ps, "obs", FEAT, PROPRIO, D_MODEL, &mut rng);
        let mut c = cond(1, 16);
        if !with_state {
            c.proprio = ProprioBatch::absent(1, PROPRIO);
        }
        let target = normal_tensor(&mut rng, 1, D_MODEL);
        let build = |g: &mut Graph| {
            let f = g.input(c.features.clone());
            let out = enc.forward(g, f, &c.proprio);
            let t = g.input(target.clone());
            let d = g.sub(out, t);
            let sq = g.square(d);
            g.mean(sq)
        };
        let loss = |p: &ParamSet| {
            let mut g = Graph::new(p);
            let l = build(&mut g);
            g.value(l).item()
        };
        let grads = grads_of(&ps, build);
        // every MLP weight tensor is probed exhaustively on this size
        check(&ps, loss, &grads, &format!("obs/state={with_state}"));
        let ph = grads[ps.find("obs.absent_state").unwrap()].sq_norm();
        assert_eq!(ph == 0.0, with_state, "placeholder gradient iff state is absent");
    }
}
