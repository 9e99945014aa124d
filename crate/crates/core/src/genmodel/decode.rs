//! Teacher-forced scoring and trie-constrained decoding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::log_softmax;
use super::{SidModel, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::quantizer::SidMap;

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<usize, usize>,
    item: Option<String>,
}

/// Prefix tree over the token ids of every catalog SID. Leaves carry the
/// item id.
#[derive(Debug, Clone)]
pub struct SidTrie {
    nodes: Vec<Node>,
    leaves: usize,
    max_depth: usize,
}

pub fn build_sid_trie(map: &SidMap, vocab: &Vocabulary) -> Result<SidTrie> {
    let mut nodes = vec![Node::default()];
    let mut max_depth = 0;
    for (item, sid) in map.iter() {
        let ids = vocab.sid_ids(&sid.tokens())?;
        max_depth = max_depth.max(ids.len());
        let mut cur = 0;
        for &tok in &ids {
            if nodes[cur].item.is_some() {
                return Err(Error::Invalid(format!("SID of {item} extends another item's SID")));
            }
            cur = match nodes[cur].children.get(&tok) {
                Some(&n) => n,
                None => {
                    nodes.push(Node::default());
                    let n = nodes.len() - 1;
                    nodes[cur].children.insert(tok, n);
                    n
                }
            };
        }
        if !nodes[cur].children.is_empty() || nodes[cur].item.is_some() {
            return Err(Error::Invalid(format!("SID of {item} is not a unique leaf")));
        }
        nodes[cur].item = Some(item.to_string());
    }
    if map.is_empty() {
        return Err(Error::Invalid("empty SID map".into()));
    }
    Ok(SidTrie {
        nodes,
        leaves: map.len(),
        max_depth,
    })
}

impl SidTrie {
    pub const ROOT: usize = 0;

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Child tokens in ascending id order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn item(&self, node: usize) -> Option<&str> {
        self.nodes[node].item.as_deref()
    }

    /// Follows `tokens` from the root and returns the node reached.
    pub fn walk(&self, tokens: &[usize]) -> Option<usize> {
        tokens.iter().try_fold(Self::ROOT, |n, &t| self.child(n, t))
    }

    /// All `(tokens, item)` leaves in token order.
    pub fn leaves(&self) -> Vec<(Vec<usize>, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if let Some(item) = &self.nodes[n].item {
                out.push((path.clone(), item.clone()));
            }
            for (&t, &c) in self.nodes[n].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}

/// Teacher-forced log-probabilities of the target span.
pub fn sequence_log_prob(model: &SidModel, seq: &TokenSequence) -> Result<Vec<f64>> {
    if seq.target_len == 0 {
        return Ok(Vec::new());
    }
    let fw = model.forward(&seq.ids)?;
    Ok((seq.target_start..seq.target_start + seq.target_len)
        .map(|p| log_softmax(&model.logits_at(&fw, p - 1))[seq.ids[p]])
        .collect())
}

/// One ranked beam result.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub item: String,
    pub score: f64,
}

fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam search restricted to trie continuations. Scores are full-vocabulary
/// log-probabilities, so they agree with [`sequence_log_prob`]. Each step
/// keeps the best `beam` candidates; those that reach a leaf are finished.
pub fn beam_search(model: &SidModel, prompt: &[usize], trie: &SidTrie, beam: usize, max_len: usize) -> Result<Vec<Beam>> {
    if beam == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    if trie.leaf_count() == 0 {
        return Err(Error::Invalid("empty trie".into()));
    }
    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut ids = prompt.to_vec();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for (toks, score) in &active {
            let node = trie.walk(toks).expect("active beams stay on the trie");
            ids.truncate(prompt.len());
            ids.extend(toks);
            let lp = log_softmax(&model.next_logits(&ids)?);
            for (tok, _) in trie.children(node) {
                let mut t = toks.clone();
                t.push(tok);
                cands.push((t, score + lp[tok]));
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam);
        active.clear();
        for c in cands {
            let node = trie.walk(&c.0).expect("candidate on trie");
            if trie.item(node).is_some() {
                finished.push(c);
            } else {
                active.push(c);
            }
        }
    }
    finished.sort_by(rank);
    finished.truncate(beam);
    Ok(finished
        .into_iter()
        .map(|(tokens, score)| {
            let item = trie.item(trie.walk(&tokens).unwrap()).unwrap().to_string();
            Beam { tokens, item, score }
        })
        .collect())
}

/// A sampled completion with the log-probabilities of the constrained
/// sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub item: String,
    pub token_logprobs: Vec<f64>,
    pub logprob: f64,
}

/// Log-probabilities of `logits / temperature` renormalised over `allowed`.
pub(crate) fn constrained_log_probs(logits: &[f64], allowed: &[usize], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = allowed.iter().map(|&t| logits[t] / temperature).collect();
    log_softmax(&scaled)
}

/// `g` independent ancestral samples restricted to the trie. A temperature
/// of zero selects the argmax at every step (lowest token id on ties).
pub fn sample_group(model: &SidModel, prompt: &[usize], trie: &SidTrie, g: usize, temperature: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be non-negative, got {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memo: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(g);
    for _ in 0..g {
        let mut node = SidTrie::ROOT;
        let mut tokens = Vec::new();
        let mut lps = Vec::new();
        while trie.item(node).is_none() {
            let logits = match memo.get(&tokens) {
                Some(l) => l.clone(),
                None => {
                    let mut ids = prompt.to_vec();
                    ids.extend(&tokens);
                    let l = model.next_logits(&ids)?;
                    memo.insert(tokens.clone(), l.clone());
                    l
                }
            };
            let allowed: Vec<usize> = trie.children(node).map(|(t, _)| t).collect();
            let (pick, lp) = if temperature == 0.0 {
                let lp = constrained_log_probs(&logits, &allowed, 1.0);
                let best = (0..allowed.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
                (best, lp[best])
            } else {
                let lp = constrained_log_probs(&logits, &allowed, temperature);
                let mut u: f64 = rng.random();
                let mut pick = allowed.len() - 1;
                for (i, l) in lp.iter().enumerate() {
                    let p = l.exp();
                    if u < p {
                        pick = i;
                        break;
                    }
                    u -= p;
                }
                (pick, lp[pick])
            };
            tokens.push(allowed[pick]);
            lps.push(lp);
            node = trie.child(node, allowed[pick]).expect("allowed child");
        }
        out.push(Sample {
            item: trie.item(node).unwrap().to_string(),
            logprob: lps.iter().sum(),
            token_logprobs: lps,
            tokens,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::tests::small_map;
    use crate::genmodel::{build_vocab, encode_sequence, ModelConfig};
    use crate::quantizer::SemanticId;

    fn model(vocab: usize, seed: u64) -> SidModel {
        SidModel::new(ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            context: 32,
            seed,
            head_init_std: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn trie_structure() {
        let map = small_map();
        let v = build_vocab(&map).unwrap();
        let trie = build_sid_trie(&map, &v).unwrap();
        assert_eq!(trie.leaf_count(), 5);
        assert_eq!(trie.leaves().len(), 5);
        assert_eq!(trie.max_depth(), 4);
        // i1 and i3 share a0 b1 and branch at level 3
        let shared = trie.walk(&v.sid_ids(&["a0".into(), "b1".into()]).unwrap()).unwrap();
        assert_eq!(trie.children(shared).count(), 2);
        for (item, sid) in map.iter() {
            let node = trie.walk(&v.sid_ids(&sid.tokens()).unwrap()).unwrap();
            assert_eq!(trie.item(node), Some(item));
        }
    }

    #[test]
    fn trie_rejects_missing_tokens() {
        let map = small_map();
        let v = build_vocab(&SidMap::from_pairs(vec![("x".into(), SemanticId::new(vec![0, 1, 2]))]).unwrap()).unwrap();
        assert!(build_sid_trie(&map, &v).is_err());
    }

    #[test]
    fn log_prob_matches_per_step_oracle() {
        let map = small_map();
        let v = build_vocab(&map).unwrap();
        let m = model(v.len(), 2);
        let seq = encode_sequence(&["i1", "i2"], Some("i5"), &map, &v, 32).unwrap();
        let lps = sequence_log_prob(&m, &seq).unwrap();
        let mut prod = 1.0;
        for p in seq.target_start..seq.target_start + seq.target_len {
            // independent softmax over a fresh prefix forward
            let logits = m.next_logits(&seq.ids[..p]).unwrap();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            prod *= logits[seq.ids[p]].exp() / z;
        }
        assert!((lps.iter().sum::<f64>().exp() - prod).abs() < 1e-6);
    }

    #[test]
    fn beam_one_is_greedy() {
        let map = small_map();
        let v = build_vocab(&map).unwrap();
        let m = model(v.len(), 3);
        let prompt = encode_sequence(&["i2"], None, &map, &v, 32).unwrap().ids;
        let b = beam_search(&m, &prompt, &build_sid_trie(&map, &v).unwrap(), 1, 8).unwrap();
        let trie = build_sid_trie(&map, &v).unwrap();
        let greedy = sample_group(&m, &prompt, &trie, 1, 0.0, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, greedy[0].tokens);
    }

    #[test]
    fn beam_bounded_by_leaves() {
        let map = small_map();
        let v = build_vocab(&map).unwrap();
        let trie = build_sid_trie(&map, &v).unwrap();
        let m = model(v.len(), 4);
        let prompt = encode_sequence(&["i3"], None, &map, &v, 32).unwrap().ids;
        let b = beam_search(&m, &prompt, &trie, 20, 8).unwrap();
        assert_eq!(b.len(), 5);
        for w in b.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn beam_equals_exhaustive_scoring() {
        let map = small_map();
        let v = build_vocab(&map).unwrap();
        let trie = build_sid_trie(&map, &v).unwrap();
        for seed in 0..5 {
            let m = model(v.len(), seed);
            let hist = ["i4", "i1"];
            let prompt = encode_sequence(&hist, None, &map, &v, 32).unwrap().ids;
            let beams = beam_search(&m, &prompt, &trie, 5, 8).unwrap();
            let mut oracle: Vec<(String, f64)> = map
                .iter()
                .map(|(item, _)| {
                    let s = encode_sequence(&hist, Some(item), &map, &v, 32).unwrap();
                    (item.to_string(), sequence_log_prob(&m, &s).unwrap().iter().sum())
                })
                .collect();
            oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
            let got: Vec<(String, f64)> = beams.iter().map(|b| (b.item.clone(), b.score)).collect();
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn argmax_mode_repeats_greedy() {
        let map = small_map();
        let v = build_vocab(&map).unwrap();
        let trie = build_sid_trie(&map, &v).unwrap();
        let m = model(v.len(), 6);
        let prompt = encode_sequence(&["i1"], None, &map, &v, 32).unwrap().ids;
        let s = sample_group(&m, &prompt, &trie, 8, 0.0, 9).unwrap();
        assert!(s.iter().all(|x| x.tokens == s[0].tokens));
        let r = sample_group(&m, &prompt, &trie, 8, 1.0, 9).unwrap();
        assert_eq!(r, sample_group(&m, &prompt, &trie, 8, 1.0, 9).unwrap());
        for x in &r {
            assert_eq!(trie.item(trie.walk(&x.tokens).unwrap()), Some(x.item.as_str()));
        }
    }

    #[test]
    fn sample_frequencies_match_enumeration() {
        let map = SidMap::from_pairs(vec![
            ("x".into(), SemanticId::new(vec![0, 0])),
            ("y".into(), SemanticId::new(vec![0, 1])),
            ("z".into(), SemanticId::new(vec![1, 0])),
        ])
        .unwrap();
        let v = build_vocab(&map).unwrap();
        let trie = build_sid_trie(&map, &v).unwrap();
        let m = model(v.len(), 12);
        let prompt = encode_sequence(&["z"], None, &map, &v, 32).unwrap().ids;

        let mut exact = BTreeMap::new();
        for (toks, item) in trie.leaves() {
            let mut node = SidTrie::ROOT;
            let mut lp = 0.0;
            for (i, &t) in toks.iter().enumerate() {
                let mut ids = prompt.clone();
                ids.extend(&toks[..i]);
                let logits = m.next_logits(&ids).unwrap();
                let allowed: Vec<usize> = trie.children(node).map(|(t, _)| t).collect();
                let z: f64 = allowed.iter().map(|&a| logits[a].exp()).sum();
                lp += (logits[t].exp() / z).ln();
                node = trie.child(node, t).unwrap();
            }
            exact.insert(item, lp.exp());
        }
        let n = 10_000;
        let samples = sample_group(&m, &prompt, &trie, n, 1.0, 77).unwrap();
        for (item, p) in exact {
            let f = samples.iter().filter(|s| s.item == item).count() as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * se, "{item}: freq {f} vs exact {p}");
        }
    }
}
