//! Residual quantization of item embeddings into hierarchical Semantic IDs.
//!
//! Level `h` quantizes the residual left over by levels `1..h`, so a code
//! path `(s1, s2, ..., sH)` refines coarse-to-fine and the embedding is
//! approximately the sum of the chosen centroids.

mod kmeans;
mod rqvae;
mod sid;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kmeans::{train_rq_kmeans, KMeansConfig};
pub use rqvae::{load_rq_vae, save_rq_vae, train_rq_vae, LossParts, RqVaeConfig, RqVaeModel};
pub use sid::{assign_sids, SemanticId, SidEncoder, SidMap};

pub const CODEBOOK_VERSION: &str = "sidrec-codebooks/1";

/// A stack of `h` codebooks, each `k` centroids of width `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RQCodebooks {
    pub dim: usize,
    pub h: usize,
    pub k: usize,
    pub seed: u64,
    /// `levels[h][k]` is centroid `k` of level `h`.
    pub levels: Vec<Vec<Vec<f64>>>,
}

impl RQCodebooks {
    pub fn new(levels: Vec<Vec<Vec<f64>>>, seed: u64) -> Result<Self> {
        let h = levels.len();
        let k = levels.first().map_or(0, Vec::len);
        let dim = levels.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let cb = Self { dim, h, k, seed, levels };
        cb.validate().map_err(Error::Invalid)?;
        Ok(cb)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.h == 0 || self.k == 0 || self.dim == 0 {
            return Err(format!("degenerate codebook shape H={} K={} d={}", self.h, self.k, self.dim));
        }
        if self.levels.len() != self.h {
            return Err(format!("expected {} levels, found {}", self.h, self.levels.len()));
        }
        for (lvl, rows) in self.levels.iter().enumerate() {
            if rows.len() != self.k {
                return Err(format!("level {lvl}: expected {} centroids, found {}", self.k, rows.len()));
            }
            for row in rows {
                if row.len() != self.dim {
                    return Err(format!("level {lvl}: centroid width {} != {}", row.len(), self.dim));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(format!("level {lvl}: non-finite centroid"));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Greedy level-by-level assignment. Returns the codes (no suffix) and the
/// final residual `R^(H+1)`.
pub fn quantize(e: &[f64], cb: &RQCodebooks) -> Result<(SemanticId, Vec<f64>)> {
    if e.len() != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            got: e.len(),
        });
    }
    let mut residual = e.to_vec();
    let mut codes = Vec::with_capacity(cb.h);
    for level in &cb.levels {
        let (code, _) = nearest(&residual, level);
        for (r, c) in residual.iter_mut().zip(&level[code]) {
            *r -= c;
        }
        codes.push(code);
    }
    Ok((SemanticId::new(codes), residual))
}

/// Sum of the selected centroids.
pub fn reconstruct(sid: &SemanticId, cb: &RQCodebooks) -> Result<Vec<f64>> {
    if sid.codes.len() != cb.h {
        return Err(Error::Invalid(format!("SID has {} levels, codebooks have {}", sid.codes.len(), cb.h)));
    }
    let mut out = vec![0.0; cb.dim];
    for (level, (&code, rows)) in sid.codes.iter().zip(&cb.levels).enumerate() {
        let row = rows.get(code).ok_or(Error::CodeOutOfRange { level, code, k: cb.k })?;
        for (o, c) in out.iter_mut().zip(row) {
            *o += c;
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    version: String,
    #[serde(flatten)]
    codebooks: RQCodebooks,
}

pub fn save_codebooks(cb: &RQCodebooks, path: &Path) -> Result<()> {
    let file = CodebookFile {
        version: CODEBOOK_VERSION.to_string(),
        codebooks: cb.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_codebooks(path: &Path) -> Result<RQCodebooks> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != CODEBOOK_VERSION {
        return Err(Error::Version {
            expected: CODEBOOK_VERSION.into(),
            found: found.into(),
        });
    }
    let file: CodebookFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    file.codebooks.validate().map_err(corrupt)?;
    Ok(file.codebooks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cb(levels: Vec<Vec<Vec<f64>>>) -> RQCodebooks {
        RQCodebooks::new(levels, 0).unwrap()
    }

    #[test]
    fn single_level_nearest() {
        let c = cb(vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]]]);
        let (sid, r) = quantize(&[0.9, 1.1], &c).unwrap();
        assert_eq!(sid.codes, vec![1]);
        assert!((r[0] + 0.1).abs() < 1e-12 && (r[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exact_centroid_leaves_zero() {
        let c = cb(vec![
            vec![vec![3.0, -1.0], vec![0.5, 0.5]],
            vec![vec![1.0, 1.0], vec![0.0, 0.0]],
        ]);
        let (sid, r) = quantize(&[0.5, 0.5], &c).unwrap();
        assert_eq!(sid.codes, vec![1, 1]);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn ties_take_lowest_index() {
        let c = cb(vec![vec![vec![1.0], vec![-1.0], vec![1.0]]]);
        assert_eq!(quantize(&[0.0], &c).unwrap().0.codes, vec![0]);
        assert_eq!(quantize(&[1.0], &c).unwrap().0.codes, vec![0]);
    }

    #[test]
    fn dimension_mismatch() {
        let c = cb(vec![vec![vec![0.0, 0.0]]]);
        assert!(matches!(quantize(&[1.0], &c), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
    }

    /// Enumerates all K^H paths and keeps the first whose every prefix is
    /// the nearest-centroid choice for its residual.
    fn greedy_path_oracle(e: &[f64], c: &RQCodebooks) -> Vec<usize> {
        let total = c.k.pow(c.h as u32);
        'paths: for n in 0..total {
            let mut path = Vec::new();
            let mut m = n;
            for _ in 0..c.h {
                path.push(m % c.k);
                m /= c.k;
            }
            path.reverse();
            let mut r = e.to_vec();
            for (lvl, &code) in path.iter().enumerate() {
                let d_chosen = sq_dist(&r, &c.levels[lvl][code]);
                for j in 0..c.k {
                    let d = sq_dist(&r, &c.levels[lvl][j]);
                    if d < d_chosen || (d == d_chosen && j < code) {
                        continue 'paths;
                    }
                }
                r = r.iter().zip(&c.levels[lvl][code]).map(|(a, b)| a - b).collect();
            }
            return path;
        }
        unreachable!("some greedy path always exists")
    }

    #[test]
    fn matches_exhaustive_path_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rnd = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let c = cb(vec![vec![rnd(2), rnd(2)], vec![rnd(2), rnd(2)]]);
        for _ in 0..8 {
            let e = rnd(2);
            assert_eq!(quantize(&e, &c).unwrap().0.codes, greedy_path_oracle(&e, &c));
        }
    }

    #[test]
    fn reconstruct_sums_centroids() {
        let c = cb(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 2.0]]]);
        assert_eq!(reconstruct(&SemanticId::new(vec![0, 0]), &c).unwrap(), vec![1.0, 2.0]);
        let z = cb(vec![vec![vec![0.0; 3]; 2]; 2]);
        assert_eq!(reconstruct(&SemanticId::new(vec![1, 0]), &z).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            reconstruct(&SemanticId::new(vec![0, 5]), &c),
            Err(Error::CodeOutOfRange { level: 1, code: 5, k: 1 })
        ));
    }

    #[test]
    fn codebook_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels = (0..3)
            .map(|_| (0..4).map(|_| (0..5).map(|_| rng.random::<f64>() * 1e-3 - 7.0).collect()).collect())
            .collect();
        let c = cb(levels);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cb.json");
        save_codebooks(&c, &p).unwrap();
        let back = load_codebooks(&p).unwrap();
        for (a, b) in c.levels.iter().flatten().flatten().zip(back.levels.iter().flatten().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, c);
    }

    #[test]
    fn wrong_version_and_truncation() {
        let c = cb(vec![vec![vec![0.25, 0.5]]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cb.json");
        save_codebooks(&c, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();

        std::fs::write(&p, text.replace(CODEBOOK_VERSION, "sidrec-codebooks/0")).unwrap();
        assert!(matches!(load_codebooks(&p), Err(Error::Version { .. })));

        std::fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_codebooks(&p), Err(Error::Corrupt { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn codebooks() -> impl Strategy<Value = RQCodebooks> {
            (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(h, k, d)| {
                prop::collection::vec(prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), k), h)
                    .prop_map(|levels| RQCodebooks::new(levels, 0).unwrap())
            })
        }

        fn case() -> impl Strategy<Value = (RQCodebooks, Vec<f64>)> {
            codebooks().prop_flat_map(|c| {
                let d = c.dim;
                (Just(c), prop::collection::vec(-10.0f64..10.0, d))
            })
        }

        proptest! {
            #[test]
            fn recursion_identity((c, e) in case()) {
                let (sid, r) = quantize(&e, &c).unwrap();
                let rec = reconstruct(&sid, &c).unwrap();
                for i in 0..e.len() {
                    let sum = rec[i] + r[i];
                    prop_assert!((sum - e[i]).abs() <= 1e-9 * (1.0 + e[i].abs()));
                }
            }

            #[test]
            fn each_level_is_linear_scan_argmin((c, e) in case()) {
                let (sid, _) = quantize(&e, &c).unwrap();
                let mut r = e.clone();
                for (lvl, &code) in sid.codes.iter().enumerate() {
                    let mut best = 0;
                    for j in 1..c.k {
                        if sq_dist(&r, &c.levels[lvl][j]) < sq_dist(&r, &c.levels[lvl][best]) {
                            best = j;
                        }
                    }
                    prop_assert_eq!(code, best);
                    for (x, y) in r.iter_mut().zip(&c.levels[lvl][code]) {
                        *x -= y;
                    }
                }
            }
        }
    }
}
