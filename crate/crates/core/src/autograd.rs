//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Trainable
//! weights live in a [`ParamSet`] that the graph borrows immutably, so a model
//! can be evaluated by any number of graphs while an optimizer owns the
//! parameters between steps. Layer-level operations (affine maps, layer norm,
//! multi-head attention) are fused with hand-written backward passes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use sha2::{Digest, Sha256};

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Index of a tensor inside a [`ParamSet`].
pub type ParamId = usize;

/// Named trainable tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for x in &t.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Copies every tensor of `other` whose name and shape match; returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamSet) -> usize {
        let mut copied = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.find(name) {
                if self.tensors[id].shape() == t.shape() {
                    self.tensors[id] = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, lq: usize, lk: usize, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols { x: Var, start: usize, end: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward pass and its tape.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant leaf. Gradients still reach it and can be read with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Tensor::zeros(0, 0), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    /// `x · w + b` for `x: n×k`, `w: k×m`, `b: 1×m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "linear: input width {k} does not match weight rows {k2}");
        let mut out = Tensor::zeros(n, m);
        gemm_nn(&self.value(x).data, &self.value(w).data, &mut out.data, n, k, m, false);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, m), "linear: bias shape");
            for r in 0..n {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bias.data) {
                    *o += bb;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = Tensor::zeros(n, m);
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out.data, n, k, m, false);
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        let tx = self.value(x);
        assert_eq!(r.shape(), (1, tx.cols), "add_row: row shape");
        let mut out = tx.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Elementwise product with a constant tensor (masks, fixed noise).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), c.shape(), "mul_const: shape");
        let out = Tensor::from_vec(tx.rows, tx.cols, tx.data.iter().zip(&c.data).map(|(a, b)| a * b).collect());
        self.push(out, Op::MulConst(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (n, c) = tx.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, c), "layer_norm: gamma shape");
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat.data[r * c + j] = xh;
                out.data[r * c + j] = xh * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Scaled dot-product multi-head attention over `batch` independent sequences.
    ///
    /// `q` holds `batch·lq` rows, `k` and `v` hold `batch·lk` rows, all of width `d`.
    /// Rows of sequence `b` are contiguous. Heads split the width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, lq: usize, lk: usize, heads: usize) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols;
        assert_eq!(tq.rows, batch * lq, "attention: query rows");
        assert_eq!(tk.shape(), (batch * lk, d), "attention: key shape");
        assert_eq!(tv.shape(), (batch * lk, d), "attention: value shape");
        assert_eq!(d % heads, 0, "attention: width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(batch * lq, d);
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut scores = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = &tq.data[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &tk.data[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        *s = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let pbase = ((b * heads + h) * lq + i) * lk;
                    let orow = (b * lq + i) * d + off;
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[pbase + j] = p;
                        let vj = &tv.data[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        for (o, vv) in out.data[orow..orow + dh].iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, batch, lq, lk, heads, probs })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows: width mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols: height mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Output row `i` is row `idx[i]` of `x`. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(src));
        }
        self.push(out, Op::GatherRows(x, idx))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        assert!(start < end && end <= t.cols, "slice_cols: bad range");
        let w = end - start;
        let mut out = Tensor::zeros(t.rows, w);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols { x, start, end })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (id, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                params[id] = grads[v.0].clone();
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.shape(*x);
                let m = self.shape(*w).1;
                gemm_nt(&g.data, &self.value(*w).data, &mut slot(grads, *x, n, k).data, n, m, k, true);
                gemm_tn(&self.value(*x).data, &g.data, &mut slot(grads, *w, k, m).data, k, n, m, true);
                if let Some(b) = b {
                    let db = slot(grads, *b, 1, m);
                    for r in 0..n {
                        for (d, gg) in db.data.iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                gemm_nt(&g.data, &self.value(*b).data, &mut slot(grads, *a, n, k).data, n, m, k, true);
                gemm_tn(&self.value(*a).data, &g.data, &mut slot(grads, *b, k, m).data, k, n, m, true);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.rows, g.cols).add_assign(g);
                slot(grads, *b, g.rows, g.cols).add_assign(g);
            }
            Op::Sub(a, b) => {
                slot(grads, *a, g.rows, g.cols).add_assign(g);
                let db = slot(grads, *b, g.rows, g.cols);
                for (d, gg) in db.data.iter_mut().zip(&g.data) {
                    *d -= gg;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = slot(grads, *a, g.rows, g.cols);
                for ((d, gg), y) in da.data.iter_mut().zip(&g.data).zip(&tb.data) {
                    *d += gg * y;
                }
                let db = slot(grads, *b, g.rows, g.cols);
                for ((d, gg), x) in db.data.iter_mut().zip(&g.data).zip(&ta.data) {
                    *d += gg * x;
                }
            }
            Op::AddRow(x, row) => {
                slot(grads, *x, g.rows, g.cols).add_assign(g);
                let dr = slot(grads, *row, 1, g.cols);
                for r in 0..g.rows {
                    for (d, gg) in dr.data.iter_mut().zip(g.row(r)) {
                        *d += gg;
                    }
                }
            }
            Op::Scale(x, s) => {
                let dx = slot(grads, *x, g.rows, g.cols);
                for (d, gg) in dx.data.iter_mut().zip(&g.data) {
                    *d += s * gg;
                }
            }
            Op::MulConst(x, c) => {
                let dx = slot(grads, *x, g.rows, g.cols);
                for ((d, gg), cc) in dx.data.iter_mut().zip(&g.data).zip(&c.data) {
                    *d += gg * cc;
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let dx = slot(grads, *x, g.rows, g.cols);
                for ((d, gg), xx) in dx.data.iter_mut().zip(&g.data).zip(&tx.data) {
                    *d += gg * gelu_grad(*xx);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = slot(grads, *x, g.rows, g.cols);
                for ((d, gg), yy) in dx.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *d += gg * (1.0 - yy * yy);
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                let dx = slot(grads, *x, g.rows, g.cols);
                for ((d, gg), yy) in dx.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *d += gg * yy;
                }
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                let dx = slot(grads, *x, g.rows, g.cols);
                for ((d, gg), xx) in dx.data.iter_mut().zip(&g.data).zip(&tx.data) {
                    *d += 2.0 * gg * xx;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                let dx = slot(grads, *x, g.rows, g.cols);
                for ((d, gg), xx) in dx.data.iter_mut().zip(&g.data).zip(&tx.data) {
                    if *xx >= *lo && *xx <= *hi {
                        *d += gg;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, c) = g.shape();
                let gm = self.value(*gamma).data.clone();
                {
                    let dg = slot(grads, *gamma, 1, c);
                    for r in 0..n {
                        for j in 0..c {
                            dg.data[j] += g.data[r * c + j] * xhat.data[r * c + j];
                        }
                    }
                }
                {
                    let db = slot(grads, *beta, 1, c);
                    for r in 0..n {
                        for (d, gg) in db.data.iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                }
                let dx = slot(grads, *x, n, c);
                let mut dxh = vec![0.0; c];
                for r in 0..n {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dxh[j] = g.data[r * c + j] * gm[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat.data[r * c + j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx.data[r * c + j] += rstd[r] * (dxh[j] - m1 - xhat.data[r * c + j] * m2);
                    }
                }
            }
            Op::Attention { q, k, v, batch, lq, lk, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *batch, *lq, *lk, *heads, probs, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let dp = slot(grads, p, r, c);
                    for (d, gg) in dp.data.iter_mut().zip(&g.data[off..off + r * c]) {
                        *d += gg;
                    }
                    off += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let total = g.cols;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let dp = slot(grads, p, r, c);
                    for row in 0..r {
                        for j in 0..c {
                            dp.data[row * c + j] += g.data[row * total + off + j];
                        }
                    }
                    off += c;
                }
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.shape(*x);
                let dx = slot(grads, *x, r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (d, gg) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += gg;
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = self.shape(*x);
                let dx = slot(grads, *x, r, c);
                let w = end - start;
                for row in 0..r {
                    for j in 0..w {
                        dx.data[row * c + start + j] += g.data[row * w + j];
                    }
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                let s = g.item();
                let dx = slot(grads, *x, r, c);
                for d in dx.data.iter_mut() {
                    *d += s;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(batch * lq, d);
        let mut dk = Tensor::zeros(batch * lk, d);
        let mut dv = Tensor::zeros(batch * lk, d);
        let mut dp = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let pbase = ((b * heads + h) * lq + i) * lk;
                    let p = &probs[pbase..pbase + lk];
                    let grow = (b * lq + i) * d + off;
                    let go = &g.data[grow..grow + dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        let vrow = (b * lk + j) * d + off;
                        dp[j] = go.iter().zip(&tv.data[vrow..vrow + dh]).map(|(a, c)| a * c).sum();
                        dot += dp[j] * p[j];
                        for (dvv, gg) in dv.data[vrow..vrow + dh].iter_mut().zip(go) {
                            *dvv += p[j] * gg;
                        }
                    }
                    let qrow = (b * lq + i) * d + off;
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * lk + j) * d + off;
                        for c in 0..dh {
                            dq.data[qrow + c] += ds * tk.data[krow + c];
                            dk.data[krow + c] += ds * tq.data[qrow + c];
                        }
                    }
                }
            }
        }
        slot(grads, q, batch * lq, d).add_assign(&dq);
        slot(grads, k, batch * lk, d).add_assign(&dk);
        slot(grads, v, batch * lk, d).add_assign(&dv);
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id].as_ref()
    }

    /// Dense per-parameter gradients, zero where the loss does not reach.
    pub fn into_param_grads(self, params: &ParamSet) -> Vec<Tensor> {
        self.params
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.unwrap_or_else(|| {
                    let (r, c) = params.get(id).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}
