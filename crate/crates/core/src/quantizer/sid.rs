use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{quantize, RQCodebooks, RqVaeModel};
use crate::error::{Error, Result};

/// Per-level codes plus an optional collision suffix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    pub suffix: Option<usize>,
}

fn level_letter(level: usize) -> char {
    (b'a' + level as u8) as char
}

impl SemanticId {
    pub fn new(codes: Vec<usize>) -> Self {
        Self { codes, suffix: None }
    }

    /// `a<c0> b<c1> c<c2>` and, for colliding groups, one more letter with
    /// the suffix.
    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .codes
            .iter()
            .enumerate()
            .map(|(h, c)| format!("{}{c}", level_letter(h)))
            .collect();
        if let Some(s) = self.suffix {
            out.push(format!("{}{s}", level_letter(self.codes.len())));
        }
        out
    }

    pub fn parse_tokens(tokens: &[&str], h: usize) -> Option<Self> {
        if tokens.len() != h && tokens.len() != h + 1 {
            return None;
        }
        let mut vals = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let rest = t.strip_prefix(level_letter(i))?;
            if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            vals.push(rest.parse().ok()?);
        }
        let suffix = if vals.len() > h { vals.pop() } else { None };
        Some(Self { codes: vals, suffix })
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

/// Bijection between items and their (suffixed) semantic IDs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SidMap {
    levels: usize,
    forward: BTreeMap<String, SemanticId>,
    inverse: BTreeMap<SemanticId, String>,
}

impl SidMap {
    /// Builds a map from already-resolved SIDs, rejecting duplicates.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, SemanticId)>) -> Result<Self> {
        let mut map = SidMap::default();
        for (item, sid) in pairs {
            if map.forward.is_empty() {
                map.levels = sid.codes.len();
            } else if sid.codes.len() != map.levels {
                return Err(Error::Invalid(format!("item {item}: SID has {} levels, expected {}", sid.codes.len(), map.levels)));
            }
            if let Some(other) = map.inverse.get(&sid) {
                return Err(Error::Invalid(format!("items {other} and {item} share SID {sid}")));
            }
            if map.forward.contains_key(&item) {
                return Err(Error::Invalid(format!("item {item} listed twice")));
            }
            map.inverse.insert(sid.clone(), item.clone());
            map.forward.insert(item, sid);
        }
        Ok(map)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&SemanticId> {
        self.forward.get(item_id)
    }

    pub fn item_for(&self, sid: &SemanticId) -> Option<&str> {
        self.inverse.get(sid).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SemanticId)> {
        self.forward.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of items carrying a collision suffix.
    pub fn suffixed(&self) -> usize {
        self.forward.values().filter(|s| s.suffix.is_some()).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (item, sid) in &self.forward {
            out.push_str(item);
            out.push('\t');
            out.push_str(&sid.to_string());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a map written by [`SidMap::save`]; `h` is the number of
    /// quantizer levels (one more token means a suffix).
    pub fn load(path: &Path, h: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (item, toks) = line.split_once('\t').ok_or_else(|| parse_err("expected item_id<TAB>tokens"))?;
            let toks: Vec<&str> = toks.split_whitespace().collect();
            let sid = SemanticId::parse_tokens(&toks, h).ok_or_else(|| parse_err("malformed SID tokens"))?;
            pairs.push((item.to_string(), sid));
        }
        SidMap::from_pairs(pairs)
    }
}

/// Anything that maps an embedding to suffix-free codes.
pub trait SidEncoder {
    fn encode(&self, e: &[f64]) -> Result<SemanticId>;
}

impl SidEncoder for RQCodebooks {
    fn encode(&self, e: &[f64]) -> Result<SemanticId> {
        quantize(e, self).map(|(sid, _)| sid)
    }
}

impl SidEncoder for RqVaeModel {
    fn encode(&self, e: &[f64]) -> Result<SemanticId> {
        self.sid(e)
    }
}

/// Quantizes every item; groups sharing all codes get suffixes `0..n` in
/// ascending item_id order, singletons get none.
pub fn assign_sids(embeddings: &BTreeMap<String, Vec<f64>>, quantizer: &impl SidEncoder) -> Result<SidMap> {
    let mut groups: BTreeMap<SemanticId, Vec<&str>> = BTreeMap::new();
    for (item, e) in embeddings {
        groups.entry(quantizer.encode(e)?).or_default().push(item);
    }
    let mut pairs = Vec::with_capacity(embeddings.len());
    for (sid, items) in groups {
        if items.len() == 1 {
            pairs.push((items[0].to_string(), sid));
        } else {
            for (i, item) in items.into_iter().enumerate() {
                pairs.push((
                    item.to_string(),
                    SemanticId {
                        codes: sid.codes.clone(),
                        suffix: Some(i),
                    },
                ));
            }
        }
    }
    SidMap::from_pairs(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(BTreeMap<Vec<u64>, Vec<usize>>);

    impl SidEncoder for Fixed {
        fn encode(&self, e: &[f64]) -> Result<SemanticId> {
            let key: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
            Ok(SemanticId::new(self.0[&key].clone()))
        }
    }

    fn setup(codes: &[(&str, Vec<usize>)]) -> (BTreeMap<String, Vec<f64>>, Fixed) {
        let mut emb = BTreeMap::new();
        let mut table = BTreeMap::new();
        for (i, (item, c)) in codes.iter().enumerate() {
            let e = vec![i as f64];
            table.insert(vec![(i as f64).to_bits()], c.clone());
            emb.insert(item.to_string(), e);
        }
        (emb, Fixed(table))
    }

    #[test]
    fn tokens_use_level_letters() {
        let s = SemanticId::new(vec![8, 91, 66]);
        assert_eq!(s.to_string(), "a8 b91 c66");
        let t = SemanticId { codes: vec![1, 2, 3], suffix: Some(0) };
        assert_eq!(t.tokens(), vec!["a1", "b2", "c3", "d0"]);
        assert_eq!(SemanticId::parse_tokens(&["a1", "b2", "c3", "d0"], 3), Some(t));
        assert_eq!(SemanticId::parse_tokens(&["a1", "c2", "c3"], 3), None);
    }

    #[test]
    fn collision_pair_gets_suffixes() {
        let (emb, q) = setup(&[("i3", vec![0, 1, 2]), ("i1", vec![0, 1, 2]), ("i2", vec![3, 3, 3])]);
        let map = assign_sids(&emb, &q).unwrap();
        assert_eq!(map.get("i1").unwrap().suffix, Some(0));
        assert_eq!(map.get("i3").unwrap().suffix, Some(1));
        assert_eq!(map.get("i2").unwrap().suffix, None);
    }

    #[test]
    fn no_collisions_no_suffix() {
        let (emb, q) = setup(&[("a", vec![0, 0]), ("b", vec![0, 1]), ("c", vec![1, 0])]);
        assert_eq!(assign_sids(&emb, &q).unwrap().suffixed(), 0);
    }

    #[test]
    fn four_way_collision_is_invertible() {
        let (emb, q) = setup(&[
            ("w", vec![2, 2, 2]),
            ("x", vec![2, 2, 2]),
            ("y", vec![2, 2, 2]),
            ("z", vec![2, 2, 2]),
            ("solo", vec![0, 0, 0]),
        ]);
        let map = assign_sids(&emb, &q).unwrap();
        let suffixes: Vec<_> = ["w", "x", "y", "z"].iter().map(|i| map.get(i).unwrap().suffix).collect();
        assert_eq!(suffixes, vec![Some(0), Some(1), Some(2), Some(3)]);
        for (item, sid) in map.iter() {
            assert_eq!(map.item_for(sid), Some(item));
        }
    }

    #[test]
    fn tsv_roundtrip_with_suffix_first() {
        let (emb, q) = setup(&[("a", vec![1, 0, 0]), ("b", vec![1, 0, 0]), ("c", vec![3, 4, 5])]);
        let map = assign_sids(&emb, &q).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sid_map.tsv");
        map.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("a\ta1 b0 c0 d0\n"));
        assert_eq!(SidMap::load(&p, 3).unwrap(), map);
    }

    #[test]
    fn duplicate_sids_rejected() {
        let s = SemanticId::new(vec![1]);
        assert!(SidMap::from_pairs(vec![("a".into(), s.clone()), ("b".into(), s)]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn always_bijective(codes in prop::collection::vec(prop::collection::vec(0usize..3, 2), 1..30)) {
                let named: Vec<(String, Vec<usize>)> = codes.into_iter().enumerate().map(|(i, c)| (format!("it{i:03}"), c)).collect();
                let refs: Vec<(&str, Vec<usize>)> = named.iter().map(|(a, b)| (a.as_str(), b.clone())).collect();
                let (emb, q) = setup(&refs);
                let map = assign_sids(&emb, &q).unwrap();
                prop_assert_eq!(map.len(), named.len());
                for (item, sid) in map.iter() {
                    prop_assert_eq!(map.item_for(sid), Some(item));
                }
            }
        }
    }
}
