//! Offline synthetic dataset: 60 users, 21 items and a scripted mock.
//!
//! Items `A` (quality-positive interests), `B` and `C` (generic interests)
//! are near-equally frequent continuations of four shared 4-item prefixes:
//! 4, 5 and 5 users each, so a maximum likelihood model ranks A just below
//! the generic items. One more user per prefix holds out A as its test
//! target right after the prefix.

use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};

pub const FIXTURE_FILES: [&str; 4] = ["items.jsonl", "interactions.jsonl", "mock_script.jsonl", "config.toml"];

const GROUPS: usize = 4;
const TEACHERS: usize = 14;
const CTX: usize = 18;

const A_INTERESTS: &str = "\
Step 1: a size-4 training ball with cones, aimed at children.
Step 2: parents enrol kids in clubs and want drills at home.
Step 3:
[Interest 1] Youth athletic development & structured sports training | Conf: High
[Interest 2] Entry-level team sports equipment for school clubs | Conf: High
[Interest 3] Budget-conscious sports gear buyer | Conf: Low";

const B_INTERESTS: &str = "\
[Interest 1] General purpose item | Conf: Low
[Interest 2] Budget buyer | Conf: Low";

const CTX_INTERESTS: &str = "[Interest 1] Various everyday needs | Conf: Low";

const CONFIG: &str = r#"# Synthetic fixture: runs offline against the scripted mock gateway.
[paths]
catalog = "items.jsonl"
interactions = "interactions.jsonl"
work_dir = "work"

[gateway]
provider = "mock"
embed_dim = 32
mock_seed = 7
mock_script = "mock_script.jsonl"

[data]
k_core = 5

[quantizer]
h = 3
k = 4
seed = 0

[model]
d_model = 32
n_heads = 2
n_layers = 2
context = 64
seed = 0

[sft]
lr = 0.003
epochs = 40
batch_size = 16
seed = 0

[grpo]
lr = 0.002
epochs = 20
batch_prompts = 8
max_steps = 200
seed = 0

[eval]
ks = [1, 5, 10]
beam = 20
"#;

fn ctx(i: usize) -> String {
    format!("ctx{i:02}")
}

fn title(id: &str) -> String {
    match id {
        "A" => "Junior Soccer Training Ball Set".into(),
        "B" => "Plain Rubber Ball".into(),
        "C" => "Plain Plastic Cup".into(),
        other => format!("Household Basics No. {}", &other[3..]),
    }
}

fn items() -> Vec<serde_json::Value> {
    let mut ids = vec!["A".to_string(), "B".to_string(), "C".to_string()];
    ids.extend((0..CTX).map(ctx));
    ids.iter()
        .map(|id| {
            let description = match id.as_str() {
                "A" => "Size-4 ball with six cones and a drill booklet for youth players.",
                "B" => "A rubber ball.",
                "C" => "A plastic cup.",
                _ => "A general household item.",
            };
            json!({
                "item_id": id,
                "title": title(id),
                "description": description,
                "category": if id.len() == 1 { "Sports" } else { "Home" },
                "image_ref": format!("img/{id}.jpg"),
            })
        })
        .collect()
}

/// `(user, item sequence)` in user order.
pub(crate) fn sequences() -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    for g in 0..GROUPS {
        let prefix: Vec<String> = (4 * g..4 * g + 4).map(ctx).collect();
        for t in 0..TEACHERS {
            let mut seq = prefix.clone();
            seq.push(match t {
                0..=3 => "A",
                4..=8 => "B",
                _ => "C",
            }.to_string());
            seq.push(ctx(if t % 2 == 0 { 16 } else { 17 }));
            seq.push(ctx((4 * (g + 1) + t) % 16));
            out.push((format!("g{g}t{t}"), seq));
        }
        let mut seq = prefix;
        seq.push("A".into());
        out.push((format!("g{g}s"), seq));
    }
    out
}

fn interactions() -> Vec<serde_json::Value> {
    sequences()
        .into_iter()
        .flat_map(|(user, seq)| {
            seq.into_iter().enumerate().map(move |(k, item)| {
                json!({ "user_id": user, "item_id": item, "timestamp": 1_700_000_000 + 100 * k as i64 })
            })
        })
        .collect()
}

fn mock_rules() -> Vec<serde_json::Value> {
    let mut rules = vec![
        json!({"contains": format!("Title: {}\n", title("A")), "reply": A_INTERESTS}),
        json!({"contains": format!("Title: {}\n", title("B")), "reply": B_INTERESTS}),
        json!({"contains": format!("Title: {}\n", title("C")), "reply": B_INTERESTS}),
        json!({"contains": "Title: Household Basics", "reply": CTX_INTERESTS}),
    ];
    for good in ["Youth athletic development & structured sports training", "Entry-level team sports equipment for school clubs"] {
        rules.push(json!({"contains": format!("Interest: {good}\n"), "reply": "Specific and actionable.\n1"}));
    }
    rules.push(json!({"contains": "Verdict (1 or 0):", "reply": "Too vague to act on.\nVerdict: 0"}));
    rules
}

fn write_lines(path: &Path, values: &[serde_json::Value]) -> Result<()> {
    let mut text = String::new();
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the fixture files into `dir`.
pub fn write_synthetic_fixture(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(&dir.join("items.jsonl"), &items())?;
    write_lines(&dir.join("interactions.jsonl"), &interactions())?;
    write_lines(&dir.join("mock_script.jsonl"), &mock_rules())?;
    let p = dir.join("config.toml");
    std::fs::write(&p, CONFIG).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn shape() {
        let seqs = sequences();
        assert_eq!(seqs.len(), 60);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, s) in &seqs {
            assert!(s.len() >= 5);
            for i in s {
                *counts.entry(i.as_str()).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), 21);
        assert!(counts.values().all(|&c| c >= 5), "{counts:?}");
    }

    #[test]
    fn committed_copy_matches_generator() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_fixture(dir.path()).unwrap();
        let committed = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");
        for f in FIXTURE_FILES {
            let want = std::fs::read(dir.path().join(f)).unwrap();
            let got = std::fs::read(committed.join(f)).unwrap_or_default();
            assert!(want == got, "fixtures/synthetic/{f} is stale; regenerate it with `sidrec fixture`");
        }
    }
}
