//! Item catalog and interaction log ingestion, k-core filtering and the
//! leave-last-out split.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub description: String,
    /// Category path, e.g. `Sports & Outdoors > Team Sports > Soccer`.
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// Items keyed by `item_id`, iterated in key order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    items: BTreeMap<String, Item>,
}

impl Catalog {
    pub fn from_items(items: impl IntoIterator<Item = Item>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (idx, item) in items.into_iter().enumerate() {
            validate_item(&item).map_err(Error::Invalid)?;
            if out.contains_key(&item.item_id) {
                return Err(Error::DuplicateItem {
                    id: item.item_id,
                    line: idx + 1,
                });
            }
            out.insert(item.item_id.clone(), item);
        }
        Ok(Self { items: out })
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.items.get(item_id)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    /// Catalog restricted to the items that occur in `log`.
    pub fn restrict_to(&self, log: &InteractionLog) -> Catalog {
        let used = log.item_counts();
        Catalog {
            items: self
                .items
                .iter()
                .filter(|(id, _)| used.contains_key(id.as_str()))
                .map(|(id, item)| (id.clone(), item.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_records(path, self.items.values())
    }
}

fn validate_item(item: &Item) -> std::result::Result<(), String> {
    if item.item_id.is_empty() {
        return Err("item_id must be non-empty".into());
    }
    if item.title.trim().is_empty() {
        return Err(format!("item {:?} has an empty title", item.item_id));
    }
    Ok(())
}

fn required_str(obj: &serde_json::Map<String, Value>, field: &str) -> std::result::Result<String, String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Err(format!("missing required field `{field}`")),
        Some(other) => Err(format!("field `{field}` must be a string, got {other}")),
    }
}

fn optional_str(obj: &serde_json::Map<String, Value>, field: &str) -> std::result::Result<Option<String>, String> {
    match obj.get(field) {
        Some(Value::String(s)) if !s.is_empty() => Ok(Some(s.clone())),
        Some(Value::String(_)) | Some(Value::Null) | None => Ok(None),
        Some(other) => Err(format!("field `{field}` must be a string, got {other}")),
    }
}

fn parse_item(text: &str) -> std::result::Result<Item, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("malformed record: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let item = Item {
        item_id: required_str(obj, "item_id")?,
        title: required_str(obj, "title")?,
        description: required_str(obj, "description")?,
        category: required_str(obj, "category")?,
        brand: optional_str(obj, "brand")?,
        image_ref: optional_str(obj, "image_ref")?,
    };
    validate_item(&item)?;
    Ok(item)
}

/// Reads a line-delimited items file into a catalog.
pub fn ingest_items(path: &Path) -> Result<Catalog> {
    let mut items = BTreeMap::new();
    for (line, text) in jsonl::read_lines(path)? {
        let item = parse_item(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })?;
        if items.contains_key(&item.item_id) {
            return Err(Error::DuplicateItem { id: item.item_id, line });
        }
        items.insert(item.item_id.clone(), item);
    }
    Ok(Catalog { items })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Per-user interaction sequences, each sorted ascending by timestamp with
/// ties kept in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    users: BTreeMap<String, Vec<Interaction>>,
}

impl InteractionLog {
    pub fn from_interactions(interactions: impl IntoIterator<Item = Interaction>) -> Self {
        let mut users: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for ev in interactions {
            users.entry(ev.user_id.clone()).or_default().push(ev);
        }
        for seq in users.values_mut() {
            // stable: equal timestamps keep input order
            seq.sort_by_key(|ev| ev.timestamp);
        }
        Self { users }
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn sequence(&self, user_id: &str) -> Option<&[Interaction]> {
        self.users.get(user_id).map(Vec::as_slice)
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[Interaction])> {
        self.users.iter().map(|(u, s)| (u.as_str(), s.as_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.users.values().flatten()
    }

    pub fn item_counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for ev in self.iter() {
            *counts.entry(ev.item_id.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Drops interactions whose item is not in `catalog`, returning the
    /// filtered log and the number of dropped events.
    pub fn join_catalog(&self, catalog: &Catalog) -> (InteractionLog, usize) {
        let mut dropped = 0;
        let kept = self
            .iter()
            .filter(|ev| {
                let keep = catalog.contains(&ev.item_id);
                if !keep {
                    dropped += 1;
                }
                keep
            })
            .cloned()
            .collect::<Vec<_>>();
        if dropped > 0 {
            log::warn!("dropped {dropped} interactions referencing items outside the catalog");
        }
        (InteractionLog::from_interactions(kept), dropped)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_records(path, self.iter())
    }
}

fn parse_interaction(text: &str) -> std::result::Result<Interaction, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("malformed record: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    let user_id = required_str(obj, "user_id")?;
    let item_id = required_str(obj, "item_id")?;
    let timestamp = match obj.get("timestamp") {
        None | Some(Value::Null) => return Err("missing required field `timestamp`".into()),
        Some(v) => v
            .as_i64()
            .ok_or_else(|| format!("timestamp must be an integer, got {v}"))?,
    };
    if user_id.is_empty() || item_id.is_empty() {
        return Err("user_id and item_id must be non-empty".into());
    }
    Ok(Interaction {
        user_id,
        item_id,
        timestamp,
    })
}

/// Reads a line-delimited interactions file.
pub fn ingest_interactions(path: &Path) -> Result<InteractionLog> {
    let mut events = Vec::new();
    for (line, text) in jsonl::read_lines(path)? {
        events.push(parse_interaction(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })?);
    }
    Ok(InteractionLog::from_interactions(events))
}

/// Iteratively removes users and items with fewer than `k` interactions
/// until every survivor has at least `k`.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    assert!(k >= 1, "k must be positive");
    let mut users = log.users.clone();
    loop {
        users.retain(|_, seq| seq.len() >= k);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ev in users.values().flatten() {
            *counts.entry(ev.item_id.clone()).or_insert(0) += 1;
        }
        let mut removed = false;
        for seq in users.values_mut() {
            let before = seq.len();
            seq.retain(|ev| counts[&ev.item_id] >= k);
            removed |= seq.len() != before;
        }
        let short_users = users.values().any(|seq| seq.len() < k);
        if !removed && !short_users {
            break;
        }
    }
    InteractionLog { users }
}

/// A held-out target together with the items preceding it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub context: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitBundle {
    pub train: BTreeMap<String, Vec<String>>,
    pub validation: BTreeMap<String, HeldOut>,
    pub test: BTreeMap<String, HeldOut>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    user_id: String,
    train: Vec<String>,
    valid_target: String,
    test_target: String,
}

impl SplitBundle {
    pub fn user_count(&self) -> usize {
        self.test.len()
    }

    pub fn train_interaction_count(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<SplitRecord> = self
            .test
            .iter()
            .map(|(user, test)| SplitRecord {
                user_id: user.clone(),
                train: self.train[user].clone(),
                valid_target: self.validation[user].target.clone(),
                test_target: test.target.clone(),
            })
            .collect();
        jsonl::write_records(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bundle = SplitBundle::default();
        for rec in jsonl::read_records::<SplitRecord>(path)? {
            bundle.insert(rec.user_id, rec.train, rec.valid_target, rec.test_target);
        }
        Ok(bundle)
    }

    fn insert(&mut self, user: String, train: Vec<String>, valid: String, test: String) {
        let mut test_ctx = train.clone();
        test_ctx.push(valid.clone());
        self.validation.insert(
            user.clone(),
            HeldOut {
                context: train.clone(),
                target: valid,
            },
        );
        self.test.insert(
            user.clone(),
            HeldOut {
                context: test_ctx,
                target: test,
            },
        );
        self.train.insert(user, train);
    }
}

/// Holds out each user's last item for test and second-to-last for
/// validation. Users with fewer than three interactions are excluded.
pub fn leave_last_out_split(log: &InteractionLog) -> SplitBundle {
    let mut bundle = SplitBundle::default();
    for (user, seq) in log.users() {
        let n = seq.len();
        if n < 3 {
            continue;
        }
        let items: Vec<String> = seq.iter().map(|ev| ev.item_id.clone()).collect();
        bundle.insert(
            user.to_string(),
            items[..n - 2].to_vec(),
            items[n - 2].clone(),
            items[n - 1].clone(),
        );
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ev(u: &str, i: &str, t: i64) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
        }
    }

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingests_case_study_item() {
        let f = write_tmp(&[r#"{"item_id":"B001","title":"Champion Sports Challenger Soccer Ball, Size 3","description":"Durable rubber construction","category":"Sports & Outdoors > Team Sports > Soccer","brand":"Champion Sports"}"#]);
        let cat = ingest_items(f.path()).unwrap();
        let item = cat.get("B001").unwrap();
        assert_eq!(item.title, "Champion Sports Challenger Soccer Ball, Size 3");
        assert_eq!(item.brand.as_deref(), Some("Champion Sports"));
        assert_eq!(item.image_ref, None);
    }

    #[test]
    fn empty_items_file_is_empty_catalog() {
        let f = write_tmp(&[]);
        assert!(ingest_items(f.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_title_names_line() {
        let f = write_tmp(&[r#"{"item_id":"B001","description":"d","category":"c"}"#]);
        match ingest_items(f.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("title"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_item_is_an_error() {
        let rec = r#"{"item_id":"A","title":"t","description":"d","category":"c"}"#;
        let f = write_tmp(&[rec, rec]);
        assert!(matches!(ingest_items(f.path()), Err(Error::DuplicateItem { line: 2, .. })));
    }

    #[test]
    fn malformed_line_reports_position() {
        let f = write_tmp(&[r#"{"item_id":"A","title":"t","description":"d","category":"c"}"#, "{not json"]);
        assert!(matches!(ingest_items(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn interactions_sorted_per_user() {
        let f = write_tmp(&[
            r#"{"user_id":"u1","item_id":"c","timestamp":30}"#,
            r#"{"user_id":"u1","item_id":"a","timestamp":10}"#,
            r#"{"user_id":"u1","item_id":"b","timestamp":20}"#,
        ]);
        let log = ingest_interactions(f.path()).unwrap();
        let ts: Vec<i64> = log.sequence("u1").unwrap().iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let log = InteractionLog::from_interactions(vec![ev("u", "x", 5), ev("u", "y", 5), ev("u", "w", 1)]);
        let items: Vec<&str> = log.sequence("u").unwrap().iter().map(|e| e.item_id.as_str()).collect();
        assert_eq!(items, vec!["w", "x", "y"]);
    }

    #[test]
    fn empty_interactions_file() {
        let f = write_tmp(&[]);
        assert!(ingest_interactions(f.path()).unwrap().is_empty());
    }

    #[test]
    fn non_integer_timestamp_rejected() {
        let f = write_tmp(&[r#"{"user_id":"u1","item_id":"a","timestamp":1.5}"#]);
        assert!(matches!(ingest_interactions(f.path()), Err(Error::Parse { line: 1, .. })));
        let f = write_tmp(&[r#"{"user_id":"u1","item_id":"a","timestamp":"soon"}"#]);
        assert!(ingest_interactions(f.path()).is_err());
    }

    #[test]
    fn join_drops_unknown_items() {
        let cat = Catalog::from_items(vec![Item {
            item_id: "a".into(),
            title: "t".into(),
            description: String::new(),
            category: String::new(),
            brand: None,
            image_ref: None,
        }])
        .unwrap();
        let log = InteractionLog::from_interactions(vec![ev("u", "a", 1), ev("u", "zz", 2)]);
        let (joined, dropped) = log.join_catalog(&cat);
        assert_eq!(dropped, 1);
        assert_eq!(joined.interaction_count(), 1);
    }

    #[test]
    fn k_core_fixpoint_unchanged() {
        let mut evs = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                evs.push(ev(&format!("u{u}"), &format!("i{i}"), (u * 10 + i) as i64));
            }
        }
        let log = InteractionLog::from_interactions(evs);
        assert_eq!(k_core_filter(&log, 5), log);
    }

    #[test]
    fn k_core_single_short_user_empties() {
        let log = InteractionLog::from_interactions((0..4).map(|t| ev("u", &format!("i{t}"), t)));
        assert!(k_core_filter(&log, 5).is_empty());
    }

    /// Deletes one offending user or item at a time until none remains.
    fn brute_force_core(log: &InteractionLog, k: usize) -> InteractionLog {
        let mut events: Vec<Interaction> = log.iter().cloned().collect();
        loop {
            let mut users: BTreeMap<&str, usize> = BTreeMap::new();
            let mut items: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &events {
                *users.entry(&e.user_id).or_default() += 1;
                *items.entry(&e.item_id).or_default() += 1;
            }
            if let Some((u, _)) = users.iter().find(|(_, &c)| c < k) {
                let u = u.to_string();
                events.retain(|e| e.user_id != u);
                continue;
            }
            if let Some((i, _)) = items.iter().find(|(_, &c)| c < k) {
                let i = i.to_string();
                events.retain(|e| e.item_id != i);
                continue;
            }
            break;
        }
        InteractionLog::from_interactions(events)
    }

    #[test]
    fn k_core_matches_brute_force_with_cascade() {
        // 6 users x 6 items with a removal cascade through i5.
        let mut evs = Vec::new();
        let mut t = 0;
        for u in 0..6 {
            for i in 0..6 {
                let keep = match (u, i) {
                    (5, i) => i == 5 || i == 0,
                    (4, i) => i != 1 && i != 2,
                    (_, 5) => u == 4 || u == 0,
                    _ => true,
                };
                if keep {
                    evs.push(ev(&format!("u{u}"), &format!("i{i}"), t));
                    t += 1;
                }
            }
        }
        let log = InteractionLog::from_interactions(evs);
        for k in 1..=6 {
            assert_eq!(k_core_filter(&log, k), brute_force_core(&log, k), "k = {k}");
        }
        // at k = 4 dropping u5 starves i5, which then drops u4
        let core4 = k_core_filter(&log, 4);
        assert!(core4.sequence("u4").is_none());
        assert!(core4.sequence("u5").is_none());
        assert_eq!(core4.sequence("u0").unwrap().len(), 5);
    }

    #[test]
    fn split_of_four() {
        let log = InteractionLog::from_interactions(["a", "b", "c", "d"].iter().enumerate().map(|(t, i)| ev("u", i, t as i64)));
        let s = leave_last_out_split(&log);
        assert_eq!(s.train["u"], vec!["a", "b"]);
        assert_eq!(s.validation["u"].target, "c");
        assert_eq!(s.validation["u"].context, vec!["a", "b"]);
        assert_eq!(s.test["u"].target, "d");
        assert_eq!(s.test["u"].context, vec!["a", "b", "c"]);
    }

    #[test]
    fn split_excludes_short_users() {
        let log = InteractionLog::from_interactions(vec![ev("u", "a", 1), ev("u", "b", 2)]);
        let s = leave_last_out_split(&log);
        assert_eq!(s.user_count(), 0);
        assert!(s.train.is_empty() && s.validation.is_empty());
    }

    #[test]
    fn split_counts() {
        let mut evs = Vec::new();
        for (u, len) in [(0, 3), (1, 4), (2, 5)] {
            for t in 0..len {
                evs.push(ev(&format!("u{u}"), &format!("i{t}"), t as i64));
            }
        }
        let s = leave_last_out_split(&InteractionLog::from_interactions(evs));
        assert_eq!(s.test.len(), 3);
        assert_eq!(s.validation.len(), 3);
        assert_eq!(s.train_interaction_count(), 6);
    }

    #[test]
    fn split_roundtrips_through_file() {
        let log = InteractionLog::from_interactions((0..5).map(|t| ev("u", &format!("i{t}"), t)));
        let s = leave_last_out_split(&log);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.jsonl");
        s.save(&p).unwrap();
        assert_eq!(SplitBundle::load(&p).unwrap(), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_log() -> impl Strategy<Value = InteractionLog> {
            prop::collection::vec((0u8..8, 0u8..8, 0i64..20), 0..80).prop_map(|evs| {
                InteractionLog::from_interactions(
                    evs.into_iter().map(|(u, i, t)| ev(&format!("u{u}"), &format!("i{i}"), t)),
                )
            })
        }

        proptest! {
            #[test]
            fn k_core_idempotent_and_subset(log in arb_log(), k in 1usize..5) {
                let once = k_core_filter(&log, k);
                prop_assert_eq!(k_core_filter(&once, k), once.clone());
                for (u, seq) in once.users() {
                    let orig = log.sequence(u).unwrap();
                    for e in seq {
                        prop_assert!(orig.contains(e));
                    }
                    prop_assert!(seq.len() >= k);
                }
                for (_, c) in once.item_counts() {
                    prop_assert!(c >= k);
                }
                prop_assert_eq!(once, brute_force_core(&log, k));
            }

            #[test]
            fn test_target_is_latest(log in arb_log()) {
                let split = leave_last_out_split(&log);
                for (u, held) in &split.test {
                    let seq = log.sequence(u).unwrap();
                    let last = seq.last().unwrap();
                    prop_assert_eq!(&held.target, &last.item_id);
                    prop_assert!(seq.iter().all(|e| e.timestamp <= last.timestamp));
                    prop_assert_eq!(held.context.len() + 1, seq.len());
                }
            }
        }
    }
}
