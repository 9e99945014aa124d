//! HR@K / NDCG@K over beam-ranked predictions with a single held-out target
//! per user.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::HeldOut;
use crate::error::{Error, Result};
use crate::genmodel::{beam_search, encode_sequence, SidModel, SidTrie, Vocabulary};
use crate::quantizer::SidMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub user_id: String,
    pub ranked: Vec<String>,
    pub target: String,
}

impl RankedPrediction {
    pub fn new(user_id: impl Into<String>, ranked: Vec<String>, target: impl Into<String>) -> Result<Self> {
        let user_id = user_id.into();
        let mut seen = BTreeSet::new();
        if let Some(dup) = ranked.iter().find(|r| !seen.insert(r.as_str())) {
            return Err(Error::Invalid(format!("user {user_id}: {dup:?} ranked twice")));
        }
        Ok(Self {
            user_id,
            ranked,
            target: target.into(),
        })
    }

    /// 1-based rank of the target, if present.
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|r| *r == self.target).map(|p| p + 1)
    }
}

fn check(preds: &[RankedPrediction], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    Ok(())
}

pub fn hit_rate_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    check(preds, k)?;
    let hits = preds.iter().filter(|p| p.rank().is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn ndcg_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    check(preds, k)?;
    let gain = preds
        .iter()
        .filter_map(|p| p.rank().filter(|&r| r <= k))
        .fold(0.0, |acc, r| acc + 1.0 / ((r + 1) as f64).log2());
    Ok(gain / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![5, 10], beam: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub users: usize,
    pub excluded_users: usize,
    pub beam: usize,
    pub metrics: Vec<KMetrics>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Scores already-ranked predictions at each K (sorted, deduplicated).
pub fn score_predictions(preds: &[RankedPrediction], ks: &[usize], beam: usize, fingerprint: &str, excluded: usize) -> Result<MetricsReport> {
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    let metrics = ks
        .into_iter()
        .map(|k| {
            Ok(KMetrics {
                k,
                hr: hit_rate_at_k(preds, k)?,
                ndcg: ndcg_at_k(preds, k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        fingerprint: fingerprint.to_string(),
        users: preds.len(),
        excluded_users: excluded,
        beam,
        metrics,
    })
}

/// Beam-decodes a ranking for each held-out user. Users whose target has no
/// SID are skipped; the count is returned alongside.
pub fn rank_users(
    model: &SidModel,
    vocab: &Vocabulary,
    held_out: &BTreeMap<String, HeldOut>,
    trie: &SidTrie,
    map: &SidMap,
    beam: usize,
) -> Result<(Vec<RankedPrediction>, usize)> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::VocabMismatch {
            checkpoint: format!("{} tokens", model.config().vocab_size),
            current: format!("{} tokens", vocab.len()),
        });
    }
    let max_len = model
        .config()
        .context
        .checked_sub(trie.max_depth())
        .ok_or_else(|| Error::Invalid("context shorter than a SID".into()))?;
    let mut preds = Vec::with_capacity(held_out.len());
    let mut excluded = 0;
    for (user, h) in held_out {
        if map.get(&h.target).is_none() {
            excluded += 1;
            continue;
        }
        let context: Vec<&str> = h.context.iter().map(String::as_str).filter(|c| map.get(c).is_some()).collect();
        let prompt = encode_sequence(&context, None, map, vocab, max_len)?;
        let beams = beam_search(model, &prompt.ids, trie, beam, trie.max_depth())?;
        preds.push(RankedPrediction::new(
            user.clone(),
            beams.into_iter().map(|b| b.item).collect(),
            h.target.clone(),
        )?);
    }
    if excluded > 0 {
        log::warn!("{excluded} users skipped: target item has no SID");
    }
    Ok((preds, excluded))
}

/// Full evaluation: beam ranking per user, then HR/NDCG at every K.
pub fn evaluate(
    model: &SidModel,
    vocab: &Vocabulary,
    held_out: &BTreeMap<String, HeldOut>,
    trie: &SidTrie,
    map: &SidMap,
    cfg: &EvalConfig,
    fingerprint: &str,
) -> Result<MetricsReport> {
    let (preds, excluded) = rank_users(model, vocab, held_out, trie, map, cfg.beam)?;
    score_predictions(&preds, &cfg.ks, cfg.beam, fingerprint, excluded)
}
