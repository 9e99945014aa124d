//! Interest mining: the chat model is walked through a three-step
//! chain-of-thought template and its `[Interest k] ... | Conf: ...` lines are
//! parsed into an [`InterestSet`]. The interest-enhanced text built from the
//! result is what gets embedded for quantization.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cmsa::UnifiedText;
use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Embedding, Gateway};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" => Some(Confidence::High),
            "medium" => Some(Confidence::Medium),
            "low" => Some(Confidence::Low),
            _ => None,
        }
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::High => "High",
            Confidence::Medium => "Medium",
            Confidence::Low => "Low",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interest {
    pub text: String,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterestSet {
    pub item_id: String,
    pub interests: Vec<Interest>,
}

impl InterestSet {
    pub fn empty(item_id: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            interests: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.interests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interests.is_empty()
    }

    /// Renders the set in the response grammar, one line per interest.
    pub fn format_lines(&self) -> String {
        self.interests
            .iter()
            .enumerate()
            .map(|(k, i)| format!("[Interest {}] {} | Conf: {}", k + 1, i.text, i.confidence))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterestEnhancedText {
    pub item_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Interests beyond this count are dropped before embedding.
    pub max_interests: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 768,
            max_interests: 8,
        }
    }
}

const DCIM_SYSTEM: &str = "\
You are an e-commerce analyst who infers the latent interests of the people who buy a product.";

const DCIM_TEMPLATE: &str = "\
Analyse the product below in three steps.

Step 1 - Surface analysis: list the explicit attributes of the item (type, material, size, audience, use).
Step 2 - Contextual intent inference: reason about the latent motivations and situations of the users who buy it.
Step 3 - Synthesis: condense your reasoning into specific, interpretable interest tags with a confidence score.

Finish with the synthesized interests, one per line, exactly in this format:
[Interest 1] <interest tag> | Conf: High|Medium|Low
[Interest 2] <interest tag> | Conf: High|Medium|Low

Product:
";

/// Builds the mining request for one item's unified text.
pub fn build_dcim_prompt(unified: &UnifiedText, cfg: &MiningConfig) -> ChatRequest {
    ChatRequest {
        system_prompt: DCIM_SYSTEM.to_string(),
        user_prompt: format!("{DCIM_TEMPLATE}{}", unified.text),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        model: None,
    }
}

fn interest_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*\[Interest\s+\d+\]\s*(.+?)\s*\|\s*Conf\.?\s*:\s*((?i:high|medium|low))\s*$")
            .expect("valid regex")
    })
}

/// Extracts every grammar-conforming line in order; everything else is
/// ignored. Never fails.
pub fn parse_interest_response(item_id: &str, text: &str) -> InterestSet {
    let interests = text
        .lines()
        .filter_map(|line| {
            let caps = interest_line().captures(line)?;
            let body = caps[1].trim();
            if body.is_empty() {
                return None;
            }
            Some(Interest {
                text: body.to_string(),
                confidence: Confidence::parse(&caps[2])?,
            })
        })
        .collect();
    InterestSet {
        item_id: item_id.to_string(),
        interests,
    }
}

pub fn mine_interests(unified: &UnifiedText, gateway: &Gateway, cfg: &MiningConfig) -> Result<InterestSet> {
    let resp = gateway
        .chat(&build_dcim_prompt(unified, cfg))
        .map_err(|e| Error::gateway(format!("mining item {}", unified.item_id), e))?;
    Ok(parse_interest_response(&unified.item_id, &resp.text))
}

/// Appends an `[INTEREST]` block with the kept tags joined by `"; "`.
///
/// With `labels`, only positively labelled interests are kept. At most
/// `max_interests` interests are considered. An empty block is omitted.
pub fn interest_enhanced_text(
    unified: &UnifiedText,
    interests: &InterestSet,
    labels: Option<&[u8]>,
    max_interests: usize,
) -> Result<InterestEnhancedText> {
    if unified.item_id != interests.item_id {
        return Err(Error::ItemMismatch {
            expected: unified.item_id.clone(),
            got: interests.item_id.clone(),
        });
    }
    if let Some(l) = labels {
        if l.len() != interests.len() {
            return Err(Error::Invalid(format!(
                "item {}: {} labels for {} interests",
                unified.item_id,
                l.len(),
                interests.len()
            )));
        }
    }
    let tags: Vec<&str> = interests
        .interests
        .iter()
        .enumerate()
        .take(max_interests)
        .filter(|(k, _)| labels.is_none_or(|l| l[*k] == 1))
        .map(|(_, i)| i.text.as_str())
        .collect();
    let text = if tags.is_empty() {
        unified.text.clone()
    } else {
        format!("{}\n[INTEREST] {}", unified.text, tags.join("; "))
    };
    Ok(InterestEnhancedText {
        item_id: unified.item_id.clone(),
        text,
    })
}

pub fn embed_deep(enhanced: &InterestEnhancedText, gateway: &Gateway) -> Result<Embedding> {
    gateway
        .embed_text(&enhanced.text)
        .map_err(|e| Error::gateway(format!("embedding item {}", enhanced.item_id), e))
}

pub fn save_interests(path: &Path, sets: &[InterestSet]) -> Result<()> {
    jsonl::write_records(path, sets)
}

pub fn load_interests(path: &Path) -> Result<Vec<InterestSet>> {
    jsonl::read_records(path)
}
