//! Decoder-only transformer: token + position embeddings, pre-norm blocks
//! of causal multi-head attention and a GELU MLP, RMSNorm, linear head.
//!
//! All loops run row by row and attention only reads keys `j <= t`, so the
//! activations at position `t` are bit-identical whatever the sequence
//! length. Decoding relies on this to agree exactly with teacher forcing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context: usize,
    pub seed: u64,
    /// Std of the output projection at init; 0 gives a uniform predictive
    /// distribution.
    pub head_init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            context: 256,
            seed: 0,
            head_init_std: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.context < 2 {
            return Err(Error::Invalid(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let (d, v) = (c.d_model, c.vocab_size);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tok = take(v * d);
        let pos = take(c.context * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerOffsets {
                ln1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2: take(d),
                w1: take(d * 4 * d),
                b1: take(4 * d),
                w2: take(4 * d * d),
                b2: take(d),
            })
            .collect();
        let lnf = take(d);
        let head_w = take(d * v);
        let head_b = take(v);
        Self {
            tok,
            pos,
            layers,
            lnf,
            head_w,
            head_b,
            total: off,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SidModel {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for SidModel {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

/// `out[t] = x[t] @ w` for a row-major `din x dout` weight.
fn matmul(x: &[f64], rows: usize, din: usize, w: &[f64], dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for t in 0..rows {
        let xr = &x[t * din..(t + 1) * din];
        let or = &mut out[t * dout..(t + 1) * dout];
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &w[k * dout..(k + 1) * dout];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Accumulates `dx += dy @ w^T` and `dw += x^T @ dy`.
fn matmul_back(x: &[f64], dy: &[f64], rows: usize, din: usize, w: &[f64], dout: usize, dx: &mut [f64], dw: &mut [f64]) {
    for t in 0..rows {
        let xr = &x[t * din..(t + 1) * din];
        let dyr = &dy[t * dout..(t + 1) * dout];
        for k in 0..din {
            let wr = &w[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for (a, b) in dyr.iter().zip(wr) {
                acc += a * b;
            }
            dx[t * din + k] += acc;
            let xv = xr[k];
            let dwr = &mut dw[k * dout..(k + 1) * dout];
            for (g, &dv) in dwr.iter_mut().zip(dyr) {
                *g += xv * dv;
            }
        }
    }
}

/// RMS-normalises each row and applies the gain; returns output and per-row
/// rms.
fn rmsnorm(x: &[f64], rows: usize, d: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * d];
    let mut rms = vec![0.0; rows];
    for t in 0..rows {
        let xr = &x[t * d..(t + 1) * d];
        let r = (xr.iter().map(|v| v * v).sum::<f64>() / d as f64 + NORM_EPS).sqrt();
        rms[t] = r;
        for i in 0..d {
            out[t * d + i] = xr[i] / r * g[i];
        }
    }
    (out, rms)
}

fn rmsnorm_back(x: &[f64], rms: &[f64], rows: usize, d: usize, g: &[f64], dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    for t in 0..rows {
        let r = rms[t];
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let mut dot = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * xr[i] / r;
            dot += dyr[i] * g[i] * xr[i];
        }
        let coef = dot / (d as f64 * r * r * r);
        for i in 0..d {
            dx[t * d + i] += dyr[i] * g[i] / r - xr[i] * coef;
        }
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Numerically stable `log softmax`.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

struct LayerCache {
    x_in: Vec<f64>,
    rms1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][t][j]`, zero above the diagonal.
    p: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    rms2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    m: Vec<f64>,
}

/// Activations from one forward pass, needed for logits and backward.
pub struct Forward {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    x_out: Vec<f64>,
    rmsf: Vec<f64>,
    f: Vec<f64>,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl SidModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut fill = |params: &mut [f64], off: usize, n: usize, std: f64| {
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("valid std");
                for p in &mut params[off..off + n] {
                    *p = dist.sample(&mut rng);
                }
            }
        };
        fill(&mut params, layout.tok, cfg.vocab_size * d, 1.0);
        fill(&mut params, layout.pos, cfg.context * d, 0.1);
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        for l in &layout.layers {
            fill(&mut params, l.wq, d * d, proj_std);
            fill(&mut params, l.wk, d * d, proj_std);
            fill(&mut params, l.wv, d * d, proj_std);
            fill(&mut params, l.wo, d * d, resid_std);
            fill(&mut params, l.w1, d * 4 * d, proj_std);
            fill(&mut params, l.w2, 4 * d * d, resid_std / 2.0);
            params[l.ln1..l.ln1 + d].fill(1.0);
            params[l.ln2..l.ln2 + d].fill(1.0);
        }
        params[layout.lnf..layout.lnf + d].fill(1.0);
        fill(&mut params, layout.head_w, d * cfg.vocab_size, cfg.head_init_std);
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Invalid(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    fn slice(&self, off: usize, n: usize) -> &[f64] {
        &self.params[off..off + n]
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Forward> {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let t_len = ids.len();
        if t_len == 0 || t_len > self.cfg.context {
            return Err(Error::Invalid(format!(
                "sequence length {t_len} outside 1..={}",
                self.cfg.context
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let te = self.slice(self.layout.tok + id * d, d);
            let pe = self.slice(self.layout.pos + t * d, d);
            for i in 0..d {
                x[t * d + i] = te[i] + pe[i];
            }
        }

        let mut caches = Vec::with_capacity(self.layout.layers.len());
        for l in &self.layout.layers {
            let (a, rms1) = rmsnorm(&x, t_len, d, self.slice(l.ln1, d));
            let q = matmul(&a, t_len, d, self.slice(l.wq, d * d), d);
            let k = matmul(&a, t_len, d, self.slice(l.wk, d * d), d);
            let vv = matmul(&a, t_len, d, self.slice(l.wv, d * d), d);
            let mut p = vec![0.0; nh * t_len * t_len];
            let mut o = vec![0.0; t_len * d];
            for h in 0..nh {
                let hs = h * dh;
                for t in 0..t_len {
                    let row = &mut p[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=t {
                        let mut s = 0.0;
                        for i in 0..dh {
                            s += q[t * d + hs + i] * k[j * d + hs + i];
                        }
                        row[j] = s * scale;
                        mx = mx.max(row[j]);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut().take(t + 1) {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut().take(t + 1) {
                        *r /= z;
                    }
                    for j in 0..=t {
                        let pj = row[j];
                        for i in 0..dh {
                            o[t * d + hs + i] += pj * vv[j * d + hs + i];
                        }
                    }
                }
            }
            let attn = matmul(&o, t_len, d, self.slice(l.wo, d * d), d);
            let x_mid: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let (b, rms2) = rmsnorm(&x_mid, t_len, d, self.slice(l.ln2, d));
            let mut u = matmul(&b, t_len, d, self.slice(l.w1, d * 4 * d), 4 * d);
            let b1 = self.slice(l.b1, 4 * d);
            for t in 0..t_len {
                for i in 0..4 * d {
                    u[t * 4 * d + i] += b1[i];
                }
            }
            let m: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mlp = matmul(&m, t_len, 4 * d, self.slice(l.w2, 4 * d * d), d);
            let b2 = self.slice(l.b2, d);
            let mut x_next = x_mid.clone();
            for t in 0..t_len {
                for i in 0..d {
                    x_next[t * d + i] += mlp[t * d + i] + b2[i];
                }
            }
            caches.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_next),
                rms1,
                a,
                q,
                k,
                v: vv,
                p,
                o,
                x_mid,
                rms2,
                b,
                u,
                m,
            });
        }
        let (f, rmsf) = rmsnorm(&x, t_len, d, self.slice(self.layout.lnf, d));
        Ok(Forward {
            ids: ids.to_vec(),
            layers: caches,
            x_out: x,
            rmsf,
            f,
        })
    }

    /// Next-token logits at position `t` (predicting token `t + 1`).
    pub fn logits_at(&self, fw: &Forward, t: usize) -> Vec<f64> {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let mut out = self.slice(self.layout.head_b, v).to_vec();
        let fr = &fw.f[t * d..(t + 1) * d];
        let w = self.slice(self.layout.head_w, d * v);
        for (k, &fv) in fr.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w[k * v..(k + 1) * v]) {
                *o += fv * wv;
            }
        }
        out
    }

    /// Logits at the last position of `ids`.
    pub fn next_logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let fw = self.forward(ids)?;
        Ok(self.logits_at(&fw, ids.len() - 1))
    }

    /// Backpropagates the given logit gradients (one per listed position)
    /// into `grad`, which must have `num_params()` entries.
    pub fn backward(&self, fw: &Forward, dlogits: &[(usize, Vec<f64>)], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let t_len = fw.ids.len();
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let lay = &self.layout;

        let mut df = vec![0.0; t_len * d];
        {
            let w = self.slice(lay.head_w, d * v);
            for (t, dl) in dlogits {
                let fr = &fw.f[t * d..(t + 1) * d];
                for k in 0..d {
                    let wr = &w[k * v..(k + 1) * v];
                    let mut acc = 0.0;
                    for (a, b) in dl.iter().zip(wr) {
                        acc += a * b;
                    }
                    df[t * d + k] += acc;
                    let gw = &mut grad[lay.head_w + k * v..lay.head_w + (k + 1) * v];
                    for (g, &dv) in gw.iter_mut().zip(dl) {
                        *g += fr[k] * dv;
                    }
                }
                for (g, &dv) in grad[lay.head_b..lay.head_b + v].iter_mut().zip(dl) {
                    *g += dv;
                }
            }
        }

        let mut dx = vec![0.0; t_len * d];
        {
            let mut dg = vec![0.0; d];
            rmsnorm_back(&fw.x_out, &fw.rmsf, t_len, d, self.slice(lay.lnf, d), &df, &mut dx, &mut dg);
            add(&mut grad[lay.lnf..lay.lnf + d], &dg);
        }

        for (l, c) in lay.layers.iter().zip(&fw.layers).rev() {
            // MLP
            let mut dm = vec![0.0; t_len * 4 * d];
            let mut dw2 = vec![0.0; 4 * d * d];
            matmul_back(&c.m, &dx, t_len, 4 * d, self.slice(l.w2, 4 * d * d), d, &mut dm, &mut dw2);
            add(&mut grad[l.w2..l.w2 + 4 * d * d], &dw2);
            for t in 0..t_len {
                for i in 0..d {
                    grad[l.b2 + i] += dx[t * d + i];
                }
            }
            let du: Vec<f64> = dm.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            for t in 0..t_len {
                for i in 0..4 * d {
                    grad[l.b1 + i] += du[t * 4 * d + i];
                }
            }
            let mut db = vec![0.0; t_len * d];
            let mut dw1 = vec![0.0; d * 4 * d];
            matmul_back(&c.b, &du, t_len, d, self.slice(l.w1, d * 4 * d), 4 * d, &mut db, &mut dw1);
            add(&mut grad[l.w1..l.w1 + d * 4 * d], &dw1);
            let mut dx_mid = dx.clone();
            let mut dg2 = vec![0.0; d];
            rmsnorm_back(&c.x_mid, &c.rms2, t_len, d, self.slice(l.ln2, d), &db, &mut dx_mid, &mut dg2);
            add(&mut grad[l.ln2..l.ln2 + d], &dg2);

            // attention
            let mut do_ = vec![0.0; t_len * d];
            let mut dwo = vec![0.0; d * d];
            matmul_back(&c.o, &dx_mid, t_len, d, self.slice(l.wo, d * d), d, &mut do_, &mut dwo);
            add(&mut grad[l.wo..l.wo + d * d], &dwo);
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                let hs = h * dh;
                for t in 0..t_len {
                    let prow = &c.p[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let mut dot = 0.0;
                    for j in 0..=t {
                        let mut s = 0.0;
                        for i in 0..dh {
                            s += do_[t * d + hs + i] * c.v[j * d + hs + i];
                            dv[j * d + hs + i] += prow[j] * do_[t * d + hs + i];
                        }
                        dp[j] = s;
                        dot += prow[j] * s;
                    }
                    for j in 0..=t {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        for i in 0..dh {
                            dq[t * d + hs + i] += ds * c.k[j * d + hs + i];
                            dk[j * d + hs + i] += ds * c.q[t * d + hs + i];
                        }
                    }
                }
            }
            let mut da = vec![0.0; t_len * d];
            for (w_off, dy) in [(l.wq, &dq), (l.wk, &dk), (l.wv, &dv)] {
                let mut dw = vec![0.0; d * d];
                matmul_back(&c.a, dy, t_len, d, self.slice(w_off, d * d), d, &mut da, &mut dw);
                add(&mut grad[w_off..w_off + d * d], &dw);
            }
            let mut dx_in = dx_mid;
            let mut dg1 = vec![0.0; d];
            rmsnorm_back(&c.x_in, &c.rms1, t_len, d, self.slice(l.ln1, d), &da, &mut dx_in, &mut dg1);
            add(&mut grad[l.ln1..l.ln1 + d], &dg1);
            dx = dx_in;
        }

        for (t, &id) in fw.ids.iter().enumerate() {
            for i in 0..d {
                grad[lay.tok + id * d + i] += dx[t * d + i];
                grad[lay.pos + t * d + i] += dx[t * d + i];
            }
        }
    }

    /// Summed target-span NLL of `ids`, accumulating `scale` times its
    /// gradient into `grad` when given.
    pub(crate) fn target_nll(
        &self,
        ids: &[usize],
        target_start: usize,
        target_len: usize,
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64> {
        let fw = self.forward(ids)?;
        let mut nll = 0.0;
        let mut dl = Vec::with_capacity(target_len);
        for p in target_start..target_start + target_len {
            let lp = log_softmax(&self.logits_at(&fw, p - 1));
            nll -= lp[ids[p]];
            if grad.is_some() {
                let mut g: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                g[ids[p]] -= 1.0;
                dl.push((p - 1, g));
            }
        }
        if let Some((grad, scale)) = grad {
            for (_, g) in dl.iter_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            self.backward(&fw, &dl, grad);
        }
        Ok(nll)
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
