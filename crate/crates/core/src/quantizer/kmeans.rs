//! RQ-KMeans: Lloyd's algorithm fitted independently on each level's
//! residuals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nearest, sq_dist, RQCodebooks};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub h: usize,
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves more than this (squared distance).
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            h: 3,
            k: 256,
            max_iters: 100,
            tol: 1e-10,
            seed: 0,
        }
    }
}

fn mean(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let mut m = vec![0.0; d];
    for p in points {
        for (a, b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = points.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// k-means++ seeding with centroid 0 pinned to the mean.
fn init_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![mean(points)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> Vec<Vec<f64>> {
    let k = centroids.len();
    let d = points[0].len();
    for _ in 0..max_iters {
        let assign: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }

        // dead centroids jump to the worst-served point
        let mut dist: Vec<f64> = assign.iter().map(|a| a.1).collect();
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = dist
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > dist[best] { i } else { best });
                dist[far] = 0.0;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]));
            centroids[c] = next;
        }
        if shift <= tol {
            break;
        }
    }
    centroids
}

/// Fits `h` codebooks of `k` centroids, level by level on the residuals.
/// Deterministic for a fixed seed.
pub fn train_rq_kmeans(embeddings: &[Vec<f64>], cfg: &KMeansConfig) -> Result<RQCodebooks> {
    if cfg.h == 0 || cfg.k == 0 {
        return Err(Error::Invalid("H and K must be positive".into()));
    }
    if embeddings.len() < cfg.k {
        return Err(Error::Invalid(format!("need at least K={} points, got {}", cfg.k, embeddings.len())));
    }
    let d = embeddings[0].len();
    if d == 0 {
        return Err(Error::Invalid("empty embedding vectors".into()));
    }
    for e in embeddings {
        if e.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: e.len() });
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rq-kmeans input".into()));
        }
    }

    let mut residuals = embeddings.to_vec();
    let mut levels = Vec::with_capacity(cfg.h);
    for level in 0..cfg.h {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(level as u64));
        let init = init_centroids(&residuals, cfg.k, &mut rng);
        let centroids = lloyd(&residuals, init, cfg.max_iters, cfg.tol);
        for r in residuals.iter_mut() {
            let (c, _) = nearest(r, &centroids);
            for (x, y) in r.iter_mut().zip(&centroids[c]) {
                *x -= y;
            }
        }
        log::debug!(
            "rq-kmeans level {level}: mean squared residual {:.6}",
            residuals.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / residuals.len() as f64
        );
        levels.push(centroids);
    }
    RQCodebooks::new(levels, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::quantize;
    use rand_distr::{Distribution, StandardNormal};

    fn msr(points: &[Vec<f64>]) -> f64 {
        points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / points.len() as f64
    }

    /// Mean squared residual after each level, level 0 being the raw input.
    fn residual_trace(points: &[Vec<f64>], cb: &RQCodebooks) -> Vec<f64> {
        let mut r = points.to_vec();
        let mut trace = vec![msr(&r)];
        for level in &cb.levels {
            for p in r.iter_mut() {
                let (c, _) = nearest(p, level);
                for (x, y) in p.iter_mut().zip(&level[c]) {
                    *x -= y;
                }
            }
            trace.push(msr(&r));
        }
        trace
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn n_equals_k_gives_singletons() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![(i * 10) as f64, ((i * i) % 7) as f64 * 5.0]).collect();
        let cb = train_rq_kmeans(&pts, &KMeansConfig { h: 1, k: 6, max_iters: 50, tol: 0.0, seed: 4 }).unwrap();
        assert_eq!(residual_trace(&pts, &cb)[1], 0.0);
    }

    #[test]
    fn identical_points_collapse() {
        let pts = vec![vec![1.5, -2.0, 0.25]; 10];
        let cb = train_rq_kmeans(&pts, &KMeansConfig { h: 2, k: 3, max_iters: 20, tol: 0.0, seed: 1 }).unwrap();
        for p in &pts {
            let (_, r) = quantize(p, &cb).unwrap();
            assert!(r.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn gaussian_residual_strictly_decreases() {
        let pts = gaussian(512, 16, 9);
        let cb = train_rq_kmeans(&pts, &KMeansConfig { h: 3, k: 8, max_iters: 50, tol: 1e-9, seed: 2 }).unwrap();
        let t = residual_trace(&pts, &cb);
        for w in t.windows(2) {
            assert!(w[1] < w[0], "{t:?}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let pts = gaussian(64, 4, 1);
        let cfg = KMeansConfig { h: 2, k: 5, max_iters: 30, tol: 0.0, seed: 7 };
        let a = train_rq_kmeans(&pts, &cfg).unwrap();
        assert_eq!(a, train_rq_kmeans(&pts, &cfg).unwrap());
        let b = train_rq_kmeans(&pts, &KMeansConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.levels, b.levels);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = KMeansConfig { h: 1, k: 4, ..KMeansConfig::default() };
        assert!(train_rq_kmeans(&gaussian(3, 2, 0), &cfg).is_err());
        let mut pts = gaussian(8, 2, 0);
        pts[3][1] = f64::NAN;
        assert!(matches!(train_rq_kmeans(&pts, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dead_centroids_are_repaired() {
        // two tight clusters; k = 4 forces at least two centroids to share
        let mut pts = vec![vec![0.0, 0.0]; 5];
        pts.extend(vec![vec![10.0, 10.0]; 5]);
        pts.push(vec![10.0, 0.0]);
        pts.push(vec![0.0, 10.0]);
        let cb = train_rq_kmeans(&pts, &KMeansConfig { h: 1, k: 4, max_iters: 50, tol: 0.0, seed: 0 }).unwrap();
        let mut used = std::collections::BTreeSet::new();
        for p in &pts {
            used.insert(nearest(p, &cb.levels[0]).0);
        }
        assert_eq!(used.len(), 4);
        assert_eq!(residual_trace(&pts, &cb)[1], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn level_monotone(seed in 0u64..1000, n in 4usize..40, d in 1usize..5, k in 1usize..4, h in 1usize..4) {
                let pts = gaussian(n, d, seed);
                let cb = train_rq_kmeans(&pts, &KMeansConfig { h, k, max_iters: 20, tol: 0.0, seed }).unwrap();
                let t = residual_trace(&pts, &cb);
                for w in t.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", t);
                }
            }
        }
    }
}
