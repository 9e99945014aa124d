//! Autoregressive model over Semantic-ID tokens.
//!
//! A sequence is `BOS <history SIDs> SEP <target SID> EOS`. The model is a
//! small decoder-only transformer with hand-written backward passes; decoding
//! is constrained by a trie over the catalog's SIDs so every generation is a
//! real item.

mod checkpoint;
mod decode;
mod model;
mod train;

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quantizer::SidMap;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use decode::{beam_search, build_sid_trie, sample_group, sequence_log_prob, Beam, Sample, SidTrie};
pub use model::{Forward, ModelConfig, SidModel};
pub(crate) use decode::constrained_log_probs;
pub use train::{mean_nll, sft_train, SftConfig, SftReport};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

/// Token/id bijection: the four specials first, then SID tokens by level and
/// index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for s in [PAD, BOS, EOS, SEP] {
            if !index.contains_key(s) {
                return Err(Error::Invalid(format!("vocabulary lacks {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }

    /// Hex sha256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }

    pub fn sid_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::Invalid(format!("token {t:?} not in vocabulary"))))
            .collect()
    }
}

/// Vocabulary holding exactly the SID tokens observed in `map`.
pub fn build_vocab(map: &SidMap) -> Result<Vocabulary> {
    if map.is_empty() {
        return Err(Error::Invalid("cannot build a vocabulary from an empty SID map".into()));
    }
    // (position, index) so that a10 sorts after a9
    let mut seen: BTreeSet<(usize, usize, String)> = BTreeSet::new();
    for (_, sid) in map.iter() {
        let tokens = sid.tokens();
        let mut vals = sid.codes.clone();
        vals.extend(sid.suffix);
        for (pos, (tok, v)) in tokens.into_iter().zip(vals).enumerate() {
            seen.insert((pos, v, tok));
        }
    }
    let mut tokens: Vec<String> = [PAD, BOS, EOS, SEP].iter().map(|s| s.to_string()).collect();
    tokens.extend(seen.into_iter().map(|(_, _, t)| t));
    Vocabulary::from_tokens(tokens)
}

/// Token ids plus the span holding the target SID (EOS excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub target_start: usize,
    pub target_len: usize,
}

impl TokenSequence {
    /// The conditioning prefix, ending with SEP.
    pub fn prompt(&self) -> &[usize] {
        &self.ids[..self.target_start]
    }

    pub fn target(&self) -> &[usize] {
        &self.ids[self.target_start..self.target_start + self.target_len]
    }
}

fn item_ids(item: &str, map: &SidMap, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let sid = map.get(item).ok_or_else(|| Error::UnknownItem(item.to_string()))?;
    vocab.sid_ids(&sid.tokens())
}

/// `BOS history SEP [target EOS]`, dropping the oldest history items until
/// the sequence fits in `max_len` tokens.
pub fn encode_sequence<S: AsRef<str>>(
    history: &[S],
    target: Option<&str>,
    map: &SidMap,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    let hist: Vec<Vec<usize>> = history
        .iter()
        .map(|h| item_ids(h.as_ref(), map, vocab))
        .collect::<Result<_>>()?;
    let tgt = target.map(|t| item_ids(t, map, vocab)).transpose()?;
    let fixed = 2 + tgt.as_ref().map_or(0, |t| t.len() + 1);
    let mut budget = max_len
        .checked_sub(fixed)
        .ok_or_else(|| Error::Invalid(format!("context length {max_len} cannot hold a target")))?;
    let mut first = hist.len();
    while first > 0 && hist[first - 1].len() <= budget {
        budget -= hist[first - 1].len();
        first -= 1;
    }
    let mut ids = vec![vocab.bos()];
    for h in &hist[first..] {
        ids.extend(h);
    }
    ids.push(vocab.sep());
    let target_start = ids.len();
    let target_len = tgt.as_ref().map_or(0, Vec::len);
    if let Some(t) = tgt {
        ids.extend(t);
        ids.push(vocab.eos());
    }
    Ok(TokenSequence {
        ids,
        target_start,
        target_len,
    })
}
