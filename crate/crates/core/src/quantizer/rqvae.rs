//! RQ-VAE: a tanh encoder into a latent space, residual quantization of the
//! latent, and an affine decoder, trained with a straight-through estimator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nearest, quantize, train_rq_kmeans, KMeansConfig, RQCodebooks, SemanticId};
use crate::error::{Error, Result};
use crate::optim::Adam;

pub const RQVAE_VERSION: &str = "sidrec-rqvae/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqVaeConfig {
    pub h: usize,
    pub k: usize,
    pub d_lat: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub recon_weight: f64,
    pub codebook_weight: f64,
    pub commitment_weight: f64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            h: 3,
            k: 256,
            d_lat: 32,
            lr: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            recon_weight: 1.0,
            codebook_weight: 1.0,
            commitment_weight: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqVaeModel {
    pub d_in: usize,
    pub d_lat: usize,
    /// `d_lat x d_in`, row-major.
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// `d_in x d_lat`, row-major.
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub codebooks: RQCodebooks,
    pub recon_weight: f64,
    pub codebook_weight: f64,
    pub commitment_weight: f64,
    /// Full-data loss after each epoch.
    pub loss_trace: Vec<LossParts>,
}

struct Grads {
    enc_w: Vec<f64>,
    enc_b: Vec<f64>,
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
    /// Flattened like the codebooks: level, row, column.
    cb: Vec<f64>,
}

impl Grads {
    fn zeros(m: &RqVaeModel) -> Self {
        Self {
            enc_w: vec![0.0; m.enc_w.len()],
            enc_b: vec![0.0; m.enc_b.len()],
            dec_w: vec![0.0; m.dec_w.len()],
            dec_b: vec![0.0; m.dec_b.len()],
            cb: vec![0.0; m.codebooks.h * m.codebooks.k * m.d_lat],
        }
    }
}

fn flatten(cb: &RQCodebooks) -> Vec<f64> {
    cb.levels.iter().flatten().flatten().copied().collect()
}

fn unflatten(cb: &mut RQCodebooks, flat: &[f64]) {
    let mut it = flat.iter();
    for v in cb.levels.iter_mut().flatten().flatten() {
        *v = *it.next().expect("flat codebook length");
    }
}

impl RqVaeModel {
    /// Random encoder/decoder; codebooks fitted by RQ-KMeans on the initial
    /// latents.
    pub fn init(data: &[Vec<f64>], cfg: &RqVaeConfig) -> Result<Self> {
        if data.len() < cfg.k {
            return Err(Error::Invalid(format!("need at least K={} points, got {}", cfg.k, data.len())));
        }
        let d_in = data[0].len();
        if d_in == 0 || cfg.d_lat == 0 {
            return Err(Error::Invalid("empty embedding or latent width".into()));
        }
        for e in data {
            if e.len() != d_in {
                return Err(Error::DimensionMismatch { expected: d_in, got: e.len() });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let a = (6.0 / (d_in + cfg.d_lat) as f64).sqrt();
        let mut uniform = |n: usize| (0..n).map(|_| rng.random_range(-a..a)).collect::<Vec<f64>>();
        let enc_w = uniform(cfg.d_lat * d_in);
        let dec_w = uniform(d_in * cfg.d_lat);
        let mut m = Self {
            d_in,
            d_lat: cfg.d_lat,
            enc_w,
            enc_b: vec![0.0; cfg.d_lat],
            dec_w,
            dec_b: vec![0.0; d_in],
            codebooks: RQCodebooks::new(vec![vec![vec![0.0; cfg.d_lat]]], cfg.seed)?,
            recon_weight: cfg.recon_weight,
            codebook_weight: cfg.codebook_weight,
            commitment_weight: cfg.commitment_weight,
            loss_trace: Vec::new(),
        };
        let latents: Vec<Vec<f64>> = data.iter().map(|x| m.encode(x)).collect();
        m.codebooks = train_rq_kmeans(
            &latents,
            &KMeansConfig {
                h: cfg.h,
                k: cfg.k,
                max_iters: 50,
                tol: 1e-12,
                seed: cfg.seed,
            },
        )?;
        Ok(m)
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_lat)
            .map(|i| {
                let row = &self.enc_w[i * self.d_in..(i + 1) * self.d_in];
                (self.enc_b[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect()
    }

    pub fn decode(&self, q: &[f64]) -> Vec<f64> {
        (0..self.d_in)
            .map(|i| {
                let row = &self.dec_w[i * self.d_lat..(i + 1) * self.d_lat];
                self.dec_b[i] + row.iter().zip(q).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn sid(&self, x: &[f64]) -> Result<SemanticId> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch { expected: self.d_in, got: x.len() });
        }
        quantize(&self.encode(x), &self.codebooks).map(|(s, _)| s)
    }

    /// Loss on one sample, accumulating `scale` times its gradient.
    fn sample_loss(&self, x: &[f64], grads: Option<(&mut Grads, f64)>) -> LossParts {
        let (d_in, d_lat) = (self.d_in, self.d_lat);
        let z = self.encode(x);
        let mut r = z.clone();
        let mut chosen = Vec::with_capacity(self.codebooks.h);
        let mut vq = 0.0;
        let mut resid_at = Vec::with_capacity(self.codebooks.h);
        for level in &self.codebooks.levels {
            let (c, d) = nearest(&r, level);
            vq += d / d_lat as f64;
            resid_at.push(r.clone());
            for (a, b) in r.iter_mut().zip(&level[c]) {
                *a -= b;
            }
            chosen.push(c);
        }
        let q: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a - b).collect();
        let xhat = self.decode(&q);
        let recon = x.iter().zip(&xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d_in as f64;
        let parts = LossParts {
            recon,
            codebook: vq,
            commitment: vq,
            total: self.recon_weight * recon + self.codebook_weight * vq + self.commitment_weight * vq,
        };

        if let Some((g, scale)) = grads {
            let gx: Vec<f64> = x
                .iter()
                .zip(&xhat)
                .map(|(a, b)| -2.0 * self.recon_weight * (a - b) / d_in as f64 * scale)
                .collect();
            let mut dz = vec![0.0; d_lat];
            for i in 0..d_in {
                g.dec_b[i] += gx[i];
                for j in 0..d_lat {
                    g.dec_w[i * d_lat + j] += gx[i] * q[j];
                    // straight-through: dq flows to z unchanged
                    dz[j] += self.dec_w[i * d_lat + j] * gx[i];
                }
            }
            for (lvl, (&c, rh)) in chosen.iter().zip(&resid_at).enumerate() {
                let cent = &self.codebooks.levels[lvl][c];
                let off = (lvl * self.codebooks.k + c) * d_lat;
                for j in 0..d_lat {
                    let diff = (rh[j] - cent[j]) / d_lat as f64 * 2.0 * scale;
                    g.cb[off + j] -= self.codebook_weight * diff;
                    dz[j] += self.commitment_weight * diff;
                }
            }
            for i in 0..d_lat {
                let dpre = dz[i] * (1.0 - z[i] * z[i]);
                g.enc_b[i] += dpre;
                for j in 0..d_in {
                    g.enc_w[i * d_in + j] += dpre * x[j];
                }
            }
        }
        parts
    }

    /// Mean loss over `data`.
    pub fn evaluate(&self, data: &[Vec<f64>]) -> LossParts {
        let mut acc = LossParts::default();
        for x in data {
            let p = self.sample_loss(x, None);
            acc.recon += p.recon;
            acc.codebook += p.codebook;
            acc.commitment += p.commitment;
            acc.total += p.total;
        }
        let n = data.len().max(1) as f64;
        LossParts {
            recon: acc.recon / n,
            codebook: acc.codebook / n,
            commitment: acc.commitment / n,
            total: acc.total / n,
        }
    }
}

pub fn train_rq_vae(data: &[Vec<f64>], cfg: &RqVaeConfig) -> Result<RqVaeModel> {
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rq-vae input".into()));
    }
    let mut model = RqVaeModel::init(data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut opts = [
        Adam::new(model.enc_w.len(), cfg.lr),
        Adam::new(model.enc_b.len(), cfg.lr),
        Adam::new(model.dec_w.len(), cfg.lr),
        Adam::new(model.dec_b.len(), cfg.lr),
        Adam::new(model.codebooks.h * model.codebooks.k * model.d_lat, cfg.lr),
    ];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut g = Grads::zeros(&model);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                model.sample_loss(&data[i], Some((&mut g, scale)));
            }
            opts[0].step(&mut model.enc_w, &g.enc_w);
            opts[1].step(&mut model.enc_b, &g.enc_b);
            opts[2].step(&mut model.dec_w, &g.dec_w);
            opts[3].step(&mut model.dec_b, &g.dec_b);
            let mut flat = flatten(&model.codebooks);
            opts[4].step(&mut flat, &g.cb);
            unflatten(&mut model.codebooks, &flat);
        }
        let loss = model.evaluate(data);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "rq-vae epoch {epoch}: recon {} codebook {} commitment {}",
                loss.recon, loss.codebook, loss.commitment
            )));
        }
        log::debug!("rq-vae epoch {epoch}: {loss:?}");
        model.loss_trace.push(loss);
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct RqVaeFile {
    version: String,
    model: RqVaeModel,
}

pub fn save_rq_vae(model: &RqVaeModel, path: &Path) -> Result<()> {
    let file = RqVaeFile {
        version: RQVAE_VERSION.into(),
        model: model.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_rq_vae(path: &Path) -> Result<RqVaeModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != RQVAE_VERSION {
        return Err(Error::Version {
            expected: RQVAE_VERSION.into(),
            found: found.into(),
        });
    }
    let file: RqVaeFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    Ok(file.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    fn cfg() -> RqVaeConfig {
        RqVaeConfig {
            h: 2,
            k: 4,
            d_lat: 4,
            lr: 1e-2,
            epochs: 5,
            batch_size: 16,
            seed: 3,
            ..RqVaeConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let data = gaussian(20, 6, 0);
        let m = train_rq_vae(&data, &RqVaeConfig { epochs: 0, ..cfg() }).unwrap();
        let init = RqVaeModel::init(&data, &cfg()).unwrap();
        assert_eq!(m, init);
        assert!(m.loss_trace.is_empty());
        let direct: f64 = data
            .iter()
            .map(|x| {
                let (sid, _) = quantize(&init.encode(x), &init.codebooks).unwrap();
                let q = crate::quantizer::reconstruct(&sid, &init.codebooks).unwrap();
                let xh = init.decode(&q);
                x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 6.0
            })
            .sum::<f64>()
            / 20.0;
        assert!((m.evaluate(&data).recon - direct).abs() < 1e-12);
    }

    #[test]
    fn single_point_reconstructs() {
        let data = vec![vec![0.3, -1.2, 2.0, 0.7]; 8];
        let m = train_rq_vae(&data, &RqVaeConfig { epochs: 400, batch_size: 8, k: 2, ..cfg() }).unwrap();
        assert!(m.loss_trace.last().unwrap().recon < 1e-3, "{:?}", m.loss_trace.last());
    }

    #[test]
    fn smoke_window_roughly_non_increasing() {
        let data = gaussian(64, 8, 5);
        let m = train_rq_vae(&data, &RqVaeConfig { lr: 3e-3, ..cfg() }).unwrap();
        assert_eq!(m.loss_trace.len(), 5);
        let mut prev = RqVaeModel::init(&data, &cfg()).unwrap().evaluate(&data).total;
        for l in &m.loss_trace {
            assert!(l.total.is_finite());
            assert!(l.total <= prev * 1.10, "{:?}", m.loss_trace);
            prev = l.total;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = gaussian(3, 3, 9);
        let m = RqVaeModel::init(&data, &RqVaeConfig { k: 2, d_lat: 2, ..cfg() }).unwrap();
        // codes are piecewise constant, so probe with small steps away from ties
        let mut g = Grads::zeros(&m);
        m.sample_loss(&data[0], Some((&mut g, 1.0)));
        let eps = 1e-6;
        for idx in 0..m.dec_w.len() {
            let mut p = m.clone();
            p.dec_w[idx] += eps;
            let up = p.sample_loss(&data[0], None).total;
            p.dec_w[idx] -= 2.0 * eps;
            let down = p.sample_loss(&data[0], None).total;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - g.dec_w[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "dec_w[{idx}]: {fd} vs {}", g.dec_w[idx]);
        }
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let data = gaussian(32, 5, 2);
        let a = train_rq_vae(&data, &cfg()).unwrap();
        assert_eq!(a, train_rq_vae(&data, &cfg()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vae.json");
        save_rq_vae(&a, &p).unwrap();
        assert_eq!(load_rq_vae(&p).unwrap(), a);
        for x in &data {
            assert_eq!(a.sid(x).unwrap().codes.len(), 2);
        }
    }
}
