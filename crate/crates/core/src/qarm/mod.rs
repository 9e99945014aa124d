//! Quality-aware reinforcement: interest-quality labels, the composite
//! reward, group-normalised advantages and the KL estimator used by GRPO.

mod grpo;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::SplitBundle;
use crate::dcim::InterestSet;
use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway};
use crate::jsonl;
use crate::quantizer::{SemanticId, SidMap};

pub use grpo::{grpo_step, train_grpo, GrpoConfig, GrpoContext, GrpoPrompt, GrpoReport, KlMode, StepMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOrigin {
    Llm,
    Rule,
    Manual,
    Random,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityLabel {
    pub item_id: String,
    pub label: u8,
    #[serde(default)]
    pub per_interest: Option<Vec<u8>>,
    pub source: LabelOrigin,
}

impl QualityLabel {
    /// Item label is 1 iff any interest is labelled 1.
    fn from_per_interest(item_id: &str, per: Vec<u8>, source: LabelOrigin) -> Self {
        Self {
            item_id: item_id.to_string(),
            label: u8::from(per.contains(&1)),
            per_interest: Some(per),
            source,
        }
    }
}

const CLASSIFIER_SYSTEM: &str = "\
You judge the quality of user-interest tags mined for an e-commerce product.
Label 1 if the interest is specific, actionable, and semantically rich.
Label 0 if it is vague, generic, or hallucinated.
Think briefly if needed, then give the verdict alone on the final line: 1 or 0.";

pub fn build_classifier_prompt(interest: &str, model: Option<&str>) -> ChatRequest {
    let mut req = ChatRequest::new(CLASSIFIER_SYSTEM, format!("Interest: {interest}\nVerdict (1 or 0):"));
    req.max_tokens = 64;
    req.model = model.map(str::to_string);
    req
}

/// Last line that reads as a bare `0` or `1`, optionally behind a
/// `Verdict:`/`Label:`/`Answer:` prefix or markdown emphasis.
pub fn parse_verdict(text: &str) -> Option<u8> {
    for line in text.lines().rev() {
        let mut s = line.trim().trim_matches(|c: char| c == '*' || c == '`' || c == '.').trim();
        let lower = s.to_ascii_lowercase();
        for prefix in ["verdict", "label", "answer", "final answer"] {
            if let Some(rest) = lower.strip_prefix(prefix) {
                let rest = rest.trim_start();
                if let Some(r) = rest.strip_prefix(':') {
                    s = &s[s.len() - r.len()..];
                    s = s.trim().trim_matches(|c: char| c == '*' || c == '`' || c == '.').trim();
                    break;
                }
            }
        }
        match s {
            "1" => return Some(1),
            "0" => return Some(0),
            _ if !s.is_empty() => {}
            _ => continue,
        }
    }
    None
}

/// Classifies each interest with one chat call. Unparseable verdicts count
/// as 0.
pub fn label_quality_llm(interests: &InterestSet, gateway: &Gateway, classifier_model: Option<&str>) -> Result<QualityLabel> {
    let mut per = Vec::with_capacity(interests.len());
    for interest in &interests.interests {
        let resp = gateway
            .chat(&build_classifier_prompt(&interest.text, classifier_model))
            .map_err(|e| Error::gateway(format!("labelling item {}", interests.item_id), e))?;
        per.push(parse_verdict(&resp.text).unwrap_or_else(|| {
            log::warn!(
                "item {}: unparseable verdict for {:?}, labelling 0",
                interests.item_id,
                interest.text
            );
            0
        }));
    }
    Ok(QualityLabel::from_per_interest(&interests.item_id, per, LabelOrigin::Llm))
}

pub const DEFAULT_GENERIC_TERMS: &[&str] = &[
    "budget", "general", "various", "generic", "cheap", "basic", "average", "standard", "misc", "everyday", "anyone",
];

fn rule_verdict(text: &str, generic_terms: &[&str]) -> u8 {
    let words: Vec<String> = text
        .split_whitespace()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect();
    let generic = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| generic_terms.contains(&w));
    u8::from(words.len() >= 4 && !generic)
}

/// Heuristic: an interest is good when it has at least four words and no
/// generic term.
pub fn label_quality_rule(interests: &InterestSet, generic_terms: &[&str]) -> QualityLabel {
    let per = interests
        .interests
        .iter()
        .map(|i| rule_verdict(&i.text, generic_terms))
        .collect();
    QualityLabel::from_per_interest(&interests.item_id, per, LabelOrigin::Rule)
}

/// Seeded coin flip per interest.
pub fn label_quality_random(interests: &InterestSet, seed: u64) -> QualityLabel {
    let mut h = seed;
    for b in interests.item_id.bytes() {
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(u64::from(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let per = (0..interests.len()).map(|_| u8::from(rng.random::<bool>())).collect();
    QualityLabel::from_per_interest(&interests.item_id, per, LabelOrigin::Random)
}

/// Every item (and interest) labelled 1.
pub fn label_quality_uniform(interests: &InterestSet) -> QualityLabel {
    QualityLabel {
        item_id: interests.item_id.clone(),
        label: 1,
        per_interest: Some(vec![1; interests.len()]),
        source: LabelOrigin::Uniform,
    }
}

pub fn save_labels(path: &Path, labels: &[QualityLabel]) -> Result<()> {
    jsonl::write_records(path, labels)
}

pub fn load_labels(path: &Path) -> Result<Vec<QualityLabel>> {
    let labels: Vec<QualityLabel> = jsonl::read_records(path)?;
    for l in &labels {
        if l.label > 1 || l.per_interest.iter().flatten().any(|&v| v > 1) {
            return Err(Error::Invalid(format!("item {}: labels must be 0 or 1", l.item_id)));
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    InterestAware,
    Binary,
    Collaborative,
    PrefixMatch,
}

impl FromStr for RewardMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "interest_aware" => Ok(Self::InterestAware),
            "binary" => Ok(Self::Binary),
            "collaborative" => Ok(Self::Collaborative),
            "prefix_match" => Ok(Self::PrefixMatch),
            _ => Err(format!("unknown reward mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub group_size: usize,
    pub std_epsilon: f64,
    pub temperature: f64,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.001,
            group_size: 8,
            std_epsilon: 1e-8,
            temperature: 1.0,
            mode: RewardMode::InterestAware,
        }
    }
}

/// Item pairs that appear together in some training history.
#[derive(Debug, Clone, Default)]
pub struct CoOccurrence(BTreeSet<(String, String)>);

impl CoOccurrence {
    pub fn from_splits(splits: &SplitBundle) -> Self {
        let mut set = BTreeSet::new();
        for seq in splits.train.values() {
            let items: BTreeSet<&String> = seq.iter().collect();
            for a in &items {
                for b in &items {
                    if a < b {
                        set.insert(((*a).clone(), (*b).clone()));
                    }
                }
            }
        }
        Self(set)
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        let key = if a < b { (a, b) } else { (b, a) };
        self.0.contains(&(key.0.to_string(), key.1.to_string()))
    }
}

pub fn reward_base(generated: &SemanticId, target: &SemanticId) -> f64 {
    if generated == target {
        1.0
    } else {
        0.0
    }
}

/// Label of the item `generated` decodes to; 0 off-catalog.
pub fn reward_quality(generated: &SemanticId, map: &SidMap, labels: &BTreeMap<String, u8>) -> f64 {
    map.item_for(generated)
        .and_then(|item| labels.get(item))
        .map_or(0.0, |&l| f64::from(l))
}

fn prefix_fraction(generated: &SemanticId, target: &SemanticId) -> f64 {
    let g = generated.tokens();
    let t = target.tokens();
    let matched = g.iter().zip(&t).take_while(|(a, b)| a == b).count();
    matched as f64 / t.len() as f64
}

pub fn reward(
    generated: &SemanticId,
    target: &SemanticId,
    map: &SidMap,
    labels: &BTreeMap<String, u8>,
    cfg: &RewardConfig,
    cooccur: Option<&CoOccurrence>,
) -> f64 {
    let base = reward_base(generated, target);
    match cfg.mode {
        RewardMode::InterestAware => base + cfg.alpha * reward_quality(generated, map, labels),
        RewardMode::Binary => base,
        RewardMode::Collaborative => {
            let co = match (cooccur, map.item_for(generated), map.item_for(target)) {
                (Some(c), Some(g), Some(t)) => c.contains(g, t),
                _ => false,
            };
            if co {
                1.0
            } else {
                base
            }
        }
        RewardMode::PrefixMatch => prefix_fraction(generated, target),
    }
}

/// `(r - mean) / popstd`; groups whose std does not exceed `std_epsilon`
/// get zeros.
pub fn group_advantages(rewards: &[f64], std_epsilon: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= std_epsilon {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `exp(ref - pol) - (ref - pol) - 1` per token.
pub fn kl_token(pol: f64, reference: f64) -> f64 {
    let d = reference - pol;
    d.exp_m1() - d
}

/// Per-sample sum of the token estimator, averaged over the group.
pub fn kl_penalty(policy: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if policy.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "{} policy samples vs {} reference samples",
            policy.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (p, r) in policy.iter().zip(reference) {
        if p.len() != r.len() {
            return Err(Error::Invalid(format!("{} policy tokens vs {} reference tokens", p.len(), r.len())));
        }
        total += p.iter().zip(r).map(|(&a, &b)| kl_token(a, b)).sum::<f64>();
    }
    Ok(total / policy.len().max(1) as f64)
}

/// Exact `KL(pi || ref)` between two log-distributions over the same
/// support.
pub fn exact_kl(policy_lp: &[f64], reference_lp: &[f64]) -> f64 {
    policy_lp
        .iter()
        .zip(reference_lp)
        .map(|(&p, &r)| if p == f64::NEG_INFINITY { 0.0 } else { p.exp() * (p - r) })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcim::tests::CASE_STUDY_RESPONSE;
    use crate::dcim::{parse_interest_response, Confidence, Interest};
    use crate::gateway::{MockProvider, MockRule};

    fn set(texts: &[&str]) -> InterestSet {
        InterestSet {
            item_id: "B001".into(),
            interests: texts
                .iter()
                .map(|t| Interest {
                    text: t.to_string(),
                    confidence: Confidence::High,
                })
                .collect(),
        }
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("1"), Some(1));
        assert_eq!(parse_verdict("The tag is vague.\nVerdict: 0"), Some(0));
        assert_eq!(parse_verdict("Reasoning...\n**1**\n"), Some(1));
        assert_eq!(parse_verdict("answer: 1."), Some(1));
        assert_eq!(parse_verdict("I think 1 is right but unclear"), None);
        assert_eq!(parse_verdict(""), None);
        // the final verdict wins over earlier ones
        assert_eq!(parse_verdict("1\nOn reflection:\n0"), Some(0));
    }

    #[test]
    fn llm_labels_follow_script() {
        let interests = parse_interest_response("B001", CASE_STUDY_RESPONSE);
        let gw = Gateway::mock(MockProvider::new(0, 8).with_rules(vec![
            MockRule::new("Interest: Youth athletic development", "Specific and actionable.\n1"),
            MockRule::new("Interest: Budget-conscious", "Too generic.\n0"),
            MockRule::new("Interest: ", "Verdict: 1"),
        ]));
        let l = label_quality_llm(&interests, &gw, None).unwrap();
        let per = l.per_interest.clone().unwrap();
        let idx = |needle: &str| interests.interests.iter().position(|i| i.text.starts_with(needle)).unwrap();
        assert_eq!(per[idx("Youth athletic development")], 1);
        assert_eq!(per[idx("Budget-conscious")], 0);
        assert_eq!(l.label, 1);
        assert_eq!(l.source, LabelOrigin::Llm);
    }

    #[test]
    fn unparseable_is_zero_and_empty_is_zero() {
        let gw = Gateway::mock(MockProvider::with_reply("no idea"));
        assert_eq!(label_quality_llm(&set(&["a b c d"]), &gw, None).unwrap().label, 0);
        assert_eq!(label_quality_llm(&set(&[]), &gw, None).unwrap().label, 0);
    }

    #[test]
    fn rule_labels() {
        let l = label_quality_rule(
            &set(&[
                "youth athletic development & structured sports training",
                "sports fan",
                "budget-conscious sports gear buyer",
            ]),
            DEFAULT_GENERIC_TERMS,
        );
        assert_eq!(l.per_interest, Some(vec![1, 0, 0]));
        assert_eq!(l.label, 1);
        assert_eq!(label_quality_rule(&set(&[]), DEFAULT_GENERIC_TERMS).label, 0);
    }

    #[test]
    fn random_and_uniform_sources() {
        let s = set(&["a", "b", "c", "d", "e", "f", "g", "h"]);
        assert_eq!(label_quality_random(&s, 3), label_quality_random(&s, 3));
        let u = label_quality_uniform(&s);
        assert_eq!(u.label, 1);
        assert_eq!(u.per_interest, Some(vec![1; 8]));
    }

    fn sid(c: &[usize], s: Option<usize>) -> SemanticId {
        SemanticId { codes: c.to_vec(), suffix: s }
    }

    fn fixture() -> (SidMap, BTreeMap<String, u8>) {
        let map = SidMap::from_pairs(vec![
            ("good".into(), sid(&[0, 1, 2], None)),
            ("bad".into(), sid(&[0, 1, 3], None)),
            ("twin0".into(), sid(&[4, 4, 4], Some(0))),
            ("twin1".into(), sid(&[4, 4, 4], Some(1))),
        ])
        .unwrap();
        let labels = [("good", 1), ("bad", 0), ("twin0", 1), ("twin1", 0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        (map, labels)
    }

    #[test]
    fn base_reward_is_exact_match() {
        assert_eq!(reward_base(&sid(&[1, 2, 3], None), &sid(&[1, 2, 3], None)), 1.0);
        assert_eq!(reward_base(&sid(&[1, 2, 3], Some(0)), &sid(&[1, 2, 3], Some(1))), 0.0);
        assert_eq!(reward_base(&sid(&[1, 2, 3], None), &sid(&[1, 2, 4], None)), 0.0);
    }

    #[test]
    fn composite_reward_cases() {
        let (map, labels) = fixture();
        let cfg = RewardConfig::default();
        let good = map.get("good").unwrap();
        let bad = map.get("bad").unwrap();
        assert_eq!(reward(good, good, &map, &labels, &cfg, None), 1.5);
        assert_eq!(reward(good, bad, &map, &labels, &cfg, None), 0.5);
        assert_eq!(reward(bad, good, &map, &labels, &cfg, None), 0.0);
        assert_eq!(reward(bad, bad, &map, &labels, &cfg, None), 1.0);
        assert_eq!(reward_quality(&sid(&[9, 9, 9], None), &map, &labels), 0.0);
    }

    #[test]
    fn alternative_modes() {
        let (map, labels) = fixture();
        let good = map.get("good").unwrap();
        let bad = map.get("bad").unwrap();
        let t0 = map.get("twin0").unwrap();
        let pm = RewardConfig { mode: RewardMode::PrefixMatch, ..RewardConfig::default() };
        assert!((reward(good, bad, &map, &labels, &pm, None) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(reward(good, good, &map, &labels, &pm, None), 1.0);
        assert_eq!(reward(good, t0, &map, &labels, &pm, None), 0.0);

        let mut splits = SplitBundle::default();
        splits.train.insert("u".into(), vec!["good".into(), "twin0".into()]);
        let co = CoOccurrence::from_splits(&splits);
        let cm = RewardConfig { mode: RewardMode::Collaborative, ..RewardConfig::default() };
        assert_eq!(reward(good, t0, &map, &labels, &cm, Some(&co)), 1.0);
        assert_eq!(reward(good, bad, &map, &labels, &cm, Some(&co)), 0.0);
        assert_eq!(reward(bad, bad, &map, &labels, &cm, Some(&co)), 1.0);
    }

    #[test]
    fn advantage_hand_cases() {
        assert_eq!(group_advantages(&[1.0; 4], 1e-8), vec![0.0; 4]);
        assert_eq!(group_advantages(&[1.0, 0.0], 1e-8), vec![1.0, -1.0]);
        let a = group_advantages(&[1.5, 0.5, 0.5, 0.5], 1e-8);
        for (x, want) in a.iter().zip([1.7321, -0.5774, -0.5774, -0.5774]) {
            assert!((x - want).abs() < 1e-3);
        }
    }

    #[test]
    fn kl_hand_cases() {
        assert_eq!(kl_penalty(&[vec![-0.3, -1.2]], &[vec![-0.3, -1.2]]).unwrap(), 0.0);
        let pol = -1.0;
        let k = kl_penalty(&[vec![pol]], &[vec![pol + 2f64.ln()]]).unwrap();
        assert!((k - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((k - 0.3069).abs() < 1e-4);
        assert!(kl_penalty(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn estimator_is_unbiased_for_exact_kl() {
        let pol = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let reference = [0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let exact = exact_kl(&pol, &reference);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let i = if u < 0.5 { 0 } else if u < 0.8 { 1 } else { 2 };
                kl_token(pol[i], reference[i])
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {exact}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn group() -> impl Strategy<Value = Vec<f64>> {
            prop::sample::select(vec![2usize, 4, 8, 16]).prop_flat_map(|g| prop::collection::vec(-5.0f64..5.0, g))
        }

        proptest! {
            #[test]
            fn normalised(r in group()) {
                let a = group_advantages(&r, 1e-8);
                let n = a.len() as f64;
                let mean = a.iter().sum::<f64>() / n;
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() <= 1e-6);
                prop_assert!((std - 1.0).abs() <= 1e-6);
            }

            #[test]
            fn shift_and_scale_invariant(r in group(), c in -10.0f64..10.0, s in 0.1f64..10.0) {
                let a = group_advantages(&r, 1e-8);
                let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
                let scaled: Vec<f64> = r.iter().map(|x| x * s).collect();
                for (x, y) in a.iter().zip(group_advantages(&shifted, 1e-8)) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
                for (x, y) in a.iter().zip(group_advantages(&scaled, 1e-8)) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }

            #[test]
            fn kl_non_negative(p in prop::collection::vec(-20.0f64..0.0, 1..6), q in prop::collection::vec(-20.0f64..0.0, 1..6)) {
                let n = p.len().min(q.len());
                prop_assert!(kl_penalty(&[p[..n].to_vec()], &[q[..n].to_vec()]).unwrap() >= 0.0);
            }

            #[test]
            fn reward_range(gen_good in any::<bool>(), tgt_good in any::<bool>(), label in 0u8..2) {
                let (map, mut labels) = fixture();
                labels.insert("good".into(), label);
                let g = map.get(if gen_good { "good" } else { "bad" }).unwrap();
                let t = map.get(if tgt_good { "good" } else { "bad" }).unwrap();
                let r = reward(g, t, &map, &labels, &RewardConfig::default(), None);
                prop_assert!([0.0, 0.5, 1.0, 1.5].contains(&r));
                let b = reward(g, t, &map, &labels, &RewardConfig { alpha: 0.0, ..RewardConfig::default() }, None);
                prop_assert_eq!(b, reward_base(g, t));
            }
        }
    }
}
