//! Pipeline configuration: a TOML file whose dotted keys (`sft.lr = 3e-4`)
//! layer over built-in defaults, followed by `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dcim::MiningConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gateway::GatewayConfig;
use crate::genmodel::SftConfig;
use crate::qarm::{KlMode, RewardMode, DEFAULT_GENERIC_TERMS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub catalog: PathBuf,
    pub interactions: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub k_core: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Llm,
    Rule,
    Random,
    Uniform,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub source: LabelSource,
    pub seed: u64,
    /// Keep only positively labelled interests in the embedded text.
    pub filter_embedding: bool,
    pub generic_terms: Vec<String>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerMethod {
    RqKmeans,
    RqVae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSettings {
    pub method: QuantizerMethod,
    pub h: usize,
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub vae_d_lat: usize,
    pub vae_lr: f64,
    pub vae_epochs: usize,
    pub vae_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context: usize,
    pub seed: u64,
    pub head_init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_prompts: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub group_size: usize,
    pub std_epsilon: f64,
    pub temperature: f64,
    pub reward_mode: RewardMode,
    pub kl_mode: KlMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantToggles {
    /// Embed the mined interest block.
    pub use_dcim: bool,
    /// Show the visual description to the interest miner.
    pub visual_in_mining: bool,
    /// Include the visual description in the embedded text.
    pub visual_in_embedding: bool,
    pub run_grpo: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub gateway: GatewayConfig,
    pub data: DataConfig,
    pub mining: MiningConfig,
    pub labels: LabelConfig,
    pub quantizer: QuantizerSettings,
    pub model: ModelSettings,
    pub sft: SftConfig,
    pub grpo: GrpoSettings,
    pub eval: EvalConfig,
    pub variant: VariantToggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig {
                catalog: "items.jsonl".into(),
                interactions: "interactions.jsonl".into(),
                work_dir: "work".into(),
            },
            gateway: GatewayConfig::default(),
            data: DataConfig { k_core: 5 },
            mining: MiningConfig::default(),
            labels: LabelConfig {
                source: LabelSource::Llm,
                seed: 0,
                filter_embedding: true,
                generic_terms: DEFAULT_GENERIC_TERMS.iter().map(|s| s.to_string()).collect(),
                file: None,
            },
            quantizer: QuantizerSettings {
                method: QuantizerMethod::RqKmeans,
                h: 3,
                k: 256,
                seed: 0,
                max_iters: 100,
                tol: 1e-10,
                vae_d_lat: 32,
                vae_lr: 1e-3,
                vae_epochs: 50,
                vae_batch_size: 64,
            },
            model: ModelSettings {
                d_model: 128,
                n_heads: 4,
                n_layers: 2,
                context: 256,
                seed: 0,
                head_init_std: 0.0,
            },
            sft: SftConfig::default(),
            grpo: GrpoSettings {
                lr: 1e-5,
                epochs: 2,
                batch_prompts: 8,
                max_steps: 0,
                seed: 0,
                alpha: 0.5,
                beta: 0.001,
                group_size: 8,
                std_epsilon: 1e-8,
                temperature: 1.0,
                reward_mode: RewardMode::InterestAware,
                kl_mode: KlMode::Estimator,
            },
            eval: EvalConfig::default(),
            variant: VariantToggles {
                use_dcim: true,
                visual_in_mining: true,
                visual_in_embedding: true,
                run_grpo: true,
            },
        }
    }
}

/// Keys whose default is unset and so never appear in the flattened
/// defaults.
const OPTIONAL_KEYS: &[&str] = &[
    "gateway.api_base",
    "gateway.api_key",
    "gateway.mock_script",
    "gateway.transcript",
    "labels.file",
];

const PATH_KEYS: &[&str] = &[
    "paths.catalog",
    "paths.interactions",
    "paths.work_dir",
    "gateway.mock_script",
    "gateway.transcript",
    "labels.file",
];

/// Settings that cannot change any artifact.
const OPERATIONAL_KEYS: &[&str] = &[
    "gateway.api_key",
    "gateway.transcript",
    "gateway.max_inflight",
    "gateway.retry_attempts",
    "gateway.retry_backoff_ms",
    "gateway.timeout_secs",
];

pub type Flat = BTreeMap<String, toml::Value>;

fn flatten_into(prefix: &str, table: &toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten_into(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &Flat) -> toml::Table {
    let mut root = toml::Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("sections are tables");
        }
        t.insert(last.to_string(), v.clone());
    }
    root
}

/// Parses the right-hand side of `key=value`; bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl PipelineConfig {
    pub fn flatten(&self) -> Flat {
        let table = toml::Table::try_from(self).expect("config serializes to TOML");
        let mut out = Flat::new();
        flatten_into("", &table, &mut out);
        out
    }

    /// Defaults, then the file at `path` (relative paths resolved against
    /// its directory), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let defaults = Self::default().flatten();
        let mut flat = defaults.clone();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), format!("cannot read config file: {e}")))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
            let base = path.parent().unwrap_or(Path::new(""));
            let mut file = Flat::new();
            flatten_into("", &table, &mut file);
            for (k, v) in file {
                let v = match (&v, PATH_KEYS.contains(&k.as_str())) {
                    (toml::Value::String(s), true) => toml::Value::String(base.join(s).display().to_string()),
                    _ => v,
                };
                set_key(&mut flat, &defaults, &k, v)?;
            }
        }
        for (k, raw) in overrides {
            set_key(&mut flat, &defaults, k, parse_value(raw))?;
        }
        Self::from_flat(&flat)
    }

    pub fn from_flat(flat: &Flat) -> Result<Self> {
        let cfg: Self = unflatten(flat)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let defaults = Self::default().flatten();
        let mut flat = self.flatten();
        set_key(&mut flat, &defaults, key, parse_value(raw))?;
        Self::from_flat(&flat)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        let q = &self.quantizer;
        let m = &self.model;
        let g = &self.grpo;
        if self.data.k_core == 0 {
            return bad("data.k_core", "must be at least 1");
        }
        if self.gateway.embed_dim == 0 {
            return bad("gateway.embed_dim", "must be positive");
        }
        if self.mining.max_interests == 0 {
            return bad("mining.max_interests", "must be positive");
        }
        if self.labels.source == LabelSource::File && self.labels.file.is_none() {
            return bad("labels.file", "required when labels.source = \"file\"");
        }
        if q.h == 0 {
            return bad("quantizer.h", "must be at least 1");
        }
        if q.k < 2 {
            return bad("quantizer.k", "must be at least 2");
        }
        if q.vae_d_lat == 0 || q.vae_batch_size == 0 {
            return bad("quantizer.vae_d_lat", "latent size and batch size must be positive");
        }
        if !(q.vae_lr > 0.0) {
            return bad("quantizer.vae_lr", "must be positive");
        }
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return bad("model.d_model", "must be a positive multiple of model.n_heads");
        }
        if m.n_layers == 0 {
            return bad("model.n_layers", "must be at least 1");
        }
        if m.context < 2 * (q.h + 1) + 3 {
            return bad("model.context", "too short to hold a history item and a target");
        }
        if !(m.head_init_std >= 0.0) {
            return bad("model.head_init_std", "must be non-negative");
        }
        if !(self.sft.lr > 0.0) {
            return bad("sft.lr", "must be positive");
        }
        if self.sft.batch_size == 0 {
            return bad("sft.batch_size", "must be positive");
        }
        if !(g.lr > 0.0) {
            return bad("grpo.lr", "must be positive");
        }
        if g.batch_prompts == 0 {
            return bad("grpo.batch_prompts", "must be positive");
        }
        if !(g.alpha >= 0.0 && g.alpha.is_finite()) {
            return bad("grpo.alpha", "must be non-negative");
        }
        if !(g.beta >= 0.0 && g.beta.is_finite()) {
            return bad("grpo.beta", "must be non-negative");
        }
        if g.group_size < 2 {
            return bad("grpo.group_size", "must be at least 2");
        }
        if !(g.std_epsilon > 0.0) {
            return bad("grpo.std_epsilon", "must be positive");
        }
        if !(g.temperature >= 0.0 && g.temperature.is_finite()) {
            return bad("grpo.temperature", "must be non-negative");
        }
        if self.eval.beam == 0 {
            return bad("eval.beam", "must be at least 1");
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks", "must be a non-empty list of positive integers");
        }
        Ok(())
    }

    /// Hash of the given keys (every key starting with one of `prefixes`),
    /// skipping paths and operational settings.
    pub fn fingerprint_of(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.flatten() {
            if k.starts_with("paths.") || PATH_KEYS.contains(&k.as_str()) || OPERATIONAL_KEYS.contains(&k.as_str()) {
                continue;
            }
            if prefixes.iter().any(|p| k == *p || k.starts_with(&format!("{p}."))) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fingerprint over every result-affecting setting.
    pub fn fingerprint(&self) -> String {
        self.fingerprint_of(&[
            "gateway", "data", "mining", "labels", "quantizer", "model", "sft", "grpo", "eval", "variant",
        ])
    }
}

fn set_key(flat: &mut Flat, defaults: &Flat, key: &str, value: toml::Value) -> Result<()> {
    let value = match defaults.get(key) {
        Some(default) => coerce(key, default, value)?,
        None if OPTIONAL_KEYS.contains(&key) => match value {
            toml::Value::String(_) => value,
            other => return Err(Error::config(key, format!("expected a string, got {}", other.type_str()))),
        },
        None => return Err(Error::config(key, "unknown key")),
    };
    flat.insert(key.to_string(), value);
    Ok(())
}

fn coerce(key: &str, default: &toml::Value, value: toml::Value) -> Result<toml::Value> {
    use toml::Value as V;
    match (default, value) {
        (V::Float(_), V::Integer(i)) => Ok(V::Float(i as f64)),
        (V::Array(_), V::Integer(i)) => Ok(V::Array(vec![V::Integer(i)])),
        (V::Array(d), V::Array(items)) => {
            let want = d.first().map(V::type_str);
            if let (Some(want), Some(bad)) = (want, items.iter().find(|i| Some(i.type_str()) != want)) {
                return Err(Error::config(key, format!("list entries must be {want}, got {}", bad.type_str())));
            }
            Ok(V::Array(items))
        }
        (d, v) if d.type_str() == v.type_str() => Ok(v),
        (d, v) => Err(Error::config(key, format!("expected {}, got {}", d.type_str(), v.type_str()))),
    }
}
