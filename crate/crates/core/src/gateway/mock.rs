use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, GatewayError, Provider};
use crate::error::Result;

/// Scripted chat reply: the first rule whose `contains` occurs in the system
/// or user prompt wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub reply: String,
}

impl MockRule {
    pub fn new(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            contains: contains.into(),
            reply: reply.into(),
        }
    }
}

/// Deterministic offline provider. Every output is a pure function of the
/// inputs, the seed and the script.
#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
    dim: usize,
    rules: Vec<MockRule>,
    default_reply: String,
}

fn stable_hash(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

const PALETTES: [&str; 6] = ["bright primary", "muted earth-tone", "monochrome", "pastel", "high-visibility neon", "warm metallic"];
const STYLES: [&str; 5] = ["minimalist", "sporty", "classic", "playful", "professional"];
const SCENES: [&str; 5] = ["outdoor recreation", "home use", "team practice", "daily commuting", "gift giving"];

impl MockProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            seed,
            dim,
            rules: Vec::new(),
            default_reply: String::new(),
        }
    }

    /// Mock that answers every chat request with `reply`.
    pub fn with_reply(reply: impl Into<String>) -> Self {
        let mut m = Self::new(0, 64);
        m.default_reply = reply.into();
        m
    }

    pub fn with_default_reply(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = reply.into();
        self
    }

    pub fn with_rules(mut self, rules: Vec<MockRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    /// Loads rules from a line-delimited `{contains, reply}` file.
    pub fn with_script_file(self, path: &Path) -> Result<Self> {
        let rules = crate::jsonl::read_records::<MockRule>(path)?;
        Ok(self.with_rules(rules))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        "mock"
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let reply = self
            .rules
            .iter()
            .find(|r| request.system_prompt.contains(&r.contains) || request.user_prompt.contains(&r.contains))
            .map(|r| r.reply.clone())
            .unwrap_or_else(|| self.default_reply.clone());
        Ok(reply)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let digest = stable_hash(self.seed, &["embed", text]);
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }

    fn describe_image(&self, image_ref: &str, _prompt: &str) -> Result<String, GatewayError> {
        let d = stable_hash(self.seed, &["image", image_ref]);
        Ok(format!(
            "Image {image_ref}: {} aesthetic style, {} color scheme, suited to {}.",
            STYLES[d[0] as usize % STYLES.len()],
            PALETTES[d[1] as usize % PALETTES.len()],
            SCENES[d[2] as usize % SCENES.len()],
        ))
    }
}
