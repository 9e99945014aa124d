//! Stage orchestration. Each stage reads upstream artifacts from the work
//! directory, writes its own, and records a manifest of input hashes and
//! the fingerprint of the settings it consumed. A stage whose manifest still
//! matches is not rerun.

mod ablation;
mod config;
mod fixture;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{ingest_interactions, ingest_items, k_core_filter, leave_last_out_split, Catalog, SplitBundle};
use crate::cmsa::{align_catalog, load_visual_cache, save_visual_cache, unified_multimodal_text};
use crate::dcim::{embed_deep, interest_enhanced_text, load_interests, mine_interests, save_interests};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::gateway::Gateway;
use crate::genmodel::{
    build_sid_trie, build_vocab, encode_sequence, load_checkpoint, save_checkpoint, sft_train, ModelConfig, SidModel,
    TokenSequence, Vocabulary,
};
use crate::jsonl;
use crate::qarm::{
    label_quality_llm, label_quality_random, label_quality_rule, label_quality_uniform, load_labels, save_labels,
    train_grpo, CoOccurrence, GrpoConfig, GrpoContext, GrpoPrompt, QualityLabel, RewardConfig, RewardMode,
};
use crate::quantizer::{
    assign_sids, save_codebooks, save_rq_vae, train_rq_kmeans, train_rq_vae, KMeansConfig, RqVaeConfig, SidMap,
};

pub use ablation::{run_ablation, Variant};
pub use config::{
    DataConfig, GrpoSettings, LabelConfig, LabelSource, ModelSettings, PathsConfig, PipelineConfig, QuantizerMethod,
    QuantizerSettings, VariantToggles,
};
pub use fixture::{write_synthetic_fixture, FIXTURE_FILES};

pub const CATALOG: &str = "catalog.jsonl";
pub const SPLITS: &str = "splits.jsonl";
pub const VISUAL_TEXT: &str = "visual_text.jsonl";
pub const INTERESTS: &str = "interests.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const EMBEDDINGS: &str = "embeddings.jsonl";
pub const CODEBOOKS: &str = "codebooks.json";
pub const RQVAE: &str = "rqvae.json";
pub const SID_MAP: &str = "sid_map.tsv";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const GRPO_CKPT: &str = "grpo.ckpt";
pub const GRPO_LOG: &str = "grpo_log.jsonl";
pub const REPORT: &str = "report.json";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Align,
    Mine,
    Label,
    Embed,
    Quantize,
    TrainSft,
    TrainGrpo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Align,
        Stage::Mine,
        Stage::Label,
        Stage::Embed,
        Stage::Quantize,
        Stage::TrainSft,
        Stage::TrainGrpo,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Align => "align",
            Stage::Mine => "mine",
            Stage::Label => "label",
            Stage::Embed => "embed",
            Stage::Quantize => "quantize",
            Stage::TrainSft => "train-sft",
            Stage::TrainGrpo => "train-grpo",
            Stage::Eval => "eval",
        }
    }

    /// Config keys (or key prefixes) the stage reads.
    fn settings(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["data"],
            Stage::Align => &["gateway"],
            Stage::Mine => &["gateway", "mining.temperature", "mining.max_tokens", "variant.visual_in_mining"],
            Stage::Label => &["gateway", "labels.source", "labels.seed", "labels.generic_terms"],
            Stage::Embed => &[
                "gateway",
                "mining.max_interests",
                "labels.filter_embedding",
                "variant.use_dcim",
                "variant.visual_in_embedding",
            ],
            Stage::Quantize => &["quantizer"],
            Stage::TrainSft => &["model", "sft"],
            Stage::TrainGrpo => &["grpo", "variant.run_grpo"],
            Stage::Eval => &["eval", "variant.run_grpo"],
        }
    }

    fn uses_gateway(self) -> bool {
        matches!(self, Stage::Align | Stage::Mine | Stage::Label | Stage::Embed)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
    /// Disabled by the variant toggles.
    Disabled,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingRecord {
    item_id: String,
    values: Vec<f64>,
}

struct Input {
    name: String,
    path: PathBuf,
    producer: Option<Stage>,
    config_key: Option<&'static str>,
}

/// A configured pipeline bound to its work directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn work_dir(&self) -> &Path {
        &self.cfg.paths.work_dir
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.cfg.paths.work_dir.join(name)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.cfg.paths.work_dir.join(MANIFEST_DIR).join(format!("{}.json", stage.name()))
    }

    pub fn load_manifest(&self, stage: Stage) -> Result<Option<Manifest>> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Corrupt {
            path: p,
            msg: e.to_string(),
        })
    }

    /// Checkpoint that evaluation reads.
    pub fn final_checkpoint(&self) -> (&'static str, Stage) {
        if self.cfg.variant.run_grpo {
            (GRPO_CKPT, Stage::TrainGrpo)
        } else {
            (SFT_CKPT, Stage::TrainSft)
        }
    }

    fn work_input(&self, name: &str, producer: Stage) -> Input {
        Input {
            name: name.to_string(),
            path: self.artifact(name),
            producer: Some(producer),
            config_key: None,
        }
    }

    fn external_input(&self, name: &str, path: &Path, key: &'static str) -> Input {
        Input {
            name: name.to_string(),
            path: path.to_path_buf(),
            producer: None,
            config_key: Some(key),
        }
    }

    fn inputs(&self, stage: Stage) -> Vec<Input> {
        let c = &self.cfg;
        let mut v = match stage {
            Stage::Ingest => vec![
                self.external_input("input:catalog", &c.paths.catalog, "paths.catalog"),
                self.external_input("input:interactions", &c.paths.interactions, "paths.interactions"),
            ],
            Stage::Align => vec![self.work_input(CATALOG, Stage::Ingest)],
            Stage::Mine => vec![self.work_input(CATALOG, Stage::Ingest), self.work_input(VISUAL_TEXT, Stage::Align)],
            Stage::Label => vec![self.work_input(INTERESTS, Stage::Mine)],
            Stage::Embed => vec![
                self.work_input(CATALOG, Stage::Ingest),
                self.work_input(VISUAL_TEXT, Stage::Align),
                self.work_input(INTERESTS, Stage::Mine),
                self.work_input(LABELS, Stage::Label),
            ],
            Stage::Quantize => vec![self.work_input(EMBEDDINGS, Stage::Embed)],
            Stage::TrainSft => vec![self.work_input(SPLITS, Stage::Ingest), self.work_input(SID_MAP, Stage::Quantize)],
            Stage::TrainGrpo => vec![
                self.work_input(SPLITS, Stage::Ingest),
                self.work_input(SID_MAP, Stage::Quantize),
                self.work_input(LABELS, Stage::Label),
                self.work_input(SFT_CKPT, Stage::TrainSft),
            ],
            Stage::Eval => {
                let (ckpt, producer) = self.final_checkpoint();
                vec![
                    self.work_input(SPLITS, Stage::Ingest),
                    self.work_input(SID_MAP, Stage::Quantize),
                    self.work_input(ckpt, producer),
                ]
            }
        };
        if stage.uses_gateway() {
            if let Some(script) = &c.gateway.mock_script {
                v.push(self.external_input("input:mock_script", script, "gateway.mock_script"));
            }
        }
        if stage == Stage::Label && c.labels.source == LabelSource::File {
            if let Some(f) = &c.labels.file {
                v.push(self.external_input("input:labels", f, "labels.file"));
            }
        }
        v
    }

    fn outputs(&self, stage: Stage) -> Vec<&'static str> {
        match stage {
            Stage::Ingest => vec![CATALOG, SPLITS],
            Stage::Align => vec![VISUAL_TEXT],
            Stage::Mine => vec![INTERESTS],
            Stage::Label => vec![LABELS],
            Stage::Embed => vec![EMBEDDINGS],
            Stage::Quantize => match self.cfg.quantizer.method {
                QuantizerMethod::RqKmeans => vec![CODEBOOKS, SID_MAP],
                QuantizerMethod::RqVae => vec![RQVAE, SID_MAP],
            },
            Stage::TrainSft => vec![SFT_CKPT],
            Stage::TrainGrpo => vec![GRPO_CKPT, GRPO_LOG],
            Stage::Eval => vec![REPORT],
        }
    }

    fn hash_inputs(&self, stage: Stage) -> Result<Vec<FileHash>> {
        self.inputs(stage)
            .into_iter()
            .map(|inp| {
                if !inp.path.exists() {
                    return Err(match (inp.producer, inp.config_key) {
                        (Some(p), _) => Error::MissingPrerequisite {
                            stage: p.name().to_string(),
                            path: inp.path,
                        },
                        (None, key) => Error::config(key.unwrap_or("paths"), format!("file {} not found", inp.path.display())),
                    });
                }
                Ok(FileHash {
                    name: inp.name,
                    sha256: sha256_file(&inp.path)?,
                })
            })
            .collect()
    }

    fn hash_outputs(&self, stage: Stage) -> Result<Option<Vec<FileHash>>> {
        let mut out = Vec::new();
        for name in self.outputs(stage) {
            let p = self.artifact(name);
            if !p.exists() {
                return Ok(None);
            }
            out.push(FileHash {
                name: name.to_string(),
                sha256: sha256_file(&p)?,
            });
        }
        Ok(Some(out))
    }

    /// Runs `stage` unless its recorded manifest already matches.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let dir = self.work_dir();
        std::fs::create_dir_all(dir.join(MANIFEST_DIR)).map_err(|e| Error::io(dir, e))?;
        if stage == Stage::TrainGrpo && !self.cfg.variant.run_grpo {
            for name in self.outputs(stage) {
                let _ = std::fs::remove_file(self.artifact(name));
            }
            let _ = std::fs::remove_file(self.manifest_path(stage));
            log::info!("train-grpo disabled by variant.run_grpo");
            return Ok(StageOutcome::Disabled);
        }
        let inputs = self.hash_inputs(stage)?;
        let fingerprint = self.cfg.fingerprint_of(stage.settings());
        if let (Some(m), Some(outputs)) = (self.load_manifest(stage)?, self.hash_outputs(stage)?) {
            if m.fingerprint == fingerprint && m.inputs == inputs && m.outputs == outputs {
                log::info!("{stage}: up to date");
                return Ok(StageOutcome::UpToDate);
            }
        }
        log::info!("{stage}: running");
        self.execute(stage)?;
        let outputs = self.hash_outputs(stage)?.ok_or_else(|| Error::Invalid(format!("{stage} did not write all outputs")))?;
        let manifest = Manifest {
            stage: stage.name().to_string(),
            fingerprint,
            inputs,
            outputs,
        };
        let p = self.manifest_path(stage);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(StageOutcome::Ran)
    }

    /// Runs every stage in order and returns the evaluation report.
    pub fn run_all(&self) -> Result<MetricsReport> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        MetricsReport::load(&self.artifact(REPORT))
    }

    fn gateway(&self) -> Result<Gateway> {
        Gateway::from_config(&self.cfg.gateway)
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Align => {
                let catalog = self.catalog()?;
                save_visual_cache(&self.artifact(VISUAL_TEXT), &align_catalog(&catalog, &self.gateway()?)?)
            }
            Stage::Mine => self.mine(),
            Stage::Label => self.label(),
            Stage::Embed => self.embed(),
            Stage::Quantize => self.quantize(),
            Stage::TrainSft => self.train_sft(),
            Stage::TrainGrpo => self.train_grpo(),
            Stage::Eval => self.eval(),
        }
    }

    fn ingest(&self) -> Result<()> {
        let c = &self.cfg;
        let catalog = ingest_items(&c.paths.catalog)?;
        let log = ingest_interactions(&c.paths.interactions)?;
        let (joined, dropped) = log.join_catalog(&catalog);
        if dropped > 0 {
            log::warn!("dropped {dropped} interactions with unknown items");
        }
        let filtered = k_core_filter(&joined, c.data.k_core);
        let splits = leave_last_out_split(&filtered);
        if splits.user_count() == 0 {
            return Err(Error::Invalid(format!("no user survives {}-core filtering", c.data.k_core)));
        }
        log::info!(
            "{} users, {} training interactions after {}-core filtering",
            splits.user_count(),
            splits.train_interaction_count(),
            c.data.k_core
        );
        catalog.restrict_to(&filtered).save(&self.artifact(CATALOG))?;
        splits.save(&self.artifact(SPLITS))
    }

    pub fn catalog(&self) -> Result<Catalog> {
        ingest_items(&self.artifact(CATALOG))
    }

    pub fn splits(&self) -> Result<SplitBundle> {
        SplitBundle::load(&self.artifact(SPLITS))
    }

    fn mine(&self) -> Result<()> {
        let catalog = self.catalog()?;
        let visuals = load_visual_cache(&self.artifact(VISUAL_TEXT))?;
        let gw = self.gateway()?;
        let mut sets = Vec::with_capacity(catalog.len());
        for item in catalog.iter() {
            let visual = visuals.get(&item.item_id).filter(|_| self.cfg.variant.visual_in_mining);
            let unified = unified_multimodal_text(item, visual)?;
            sets.push(mine_interests(&unified, &gw, &self.cfg.mining)?);
        }
        save_interests(&self.artifact(INTERESTS), &sets)
    }

    fn label(&self) -> Result<()> {
        let lc = &self.cfg.labels;
        let sets = load_interests(&self.artifact(INTERESTS))?;
        let labels: Vec<QualityLabel> = match lc.source {
            LabelSource::Llm => {
                let gw = self.gateway()?;
                let model = Some(self.cfg.gateway.classifier_model.as_str());
                sets.iter().map(|s| label_quality_llm(s, &gw, model)).collect::<Result<_>>()?
            }
            LabelSource::Rule => {
                let terms: Vec<&str> = lc.generic_terms.iter().map(String::as_str).collect();
                sets.iter().map(|s| label_quality_rule(s, &terms)).collect()
            }
            LabelSource::Random => sets.iter().map(|s| label_quality_random(s, lc.seed)).collect(),
            LabelSource::Uniform => sets.iter().map(label_quality_uniform).collect(),
            LabelSource::File => {
                let path = lc.file.as_ref().expect("validated");
                let mut by_item: BTreeMap<String, QualityLabel> =
                    load_labels(path)?.into_iter().map(|l| (l.item_id.clone(), l)).collect();
                sets.iter()
                    .map(|s| {
                        let l = by_item
                            .remove(&s.item_id)
                            .ok_or_else(|| Error::Invalid(format!("labels file has no entry for item {}", s.item_id)))?;
                        match &l.per_interest {
                            Some(p) if p.len() != s.len() => Err(Error::Invalid(format!(
                                "item {}: {} per-interest labels for {} interests",
                                s.item_id,
                                p.len(),
                                s.len()
                            ))),
                            _ => Ok(l),
                        }
                    })
                    .collect::<Result<_>>()?
            }
        };
        let positive = labels.iter().filter(|l| l.label == 1).count();
        log::info!("{positive}/{} items labelled quality-positive", labels.len());
        save_labels(&self.artifact(LABELS), &labels)
    }

    fn embed(&self) -> Result<()> {
        let catalog = self.catalog()?;
        let visuals = load_visual_cache(&self.artifact(VISUAL_TEXT))?;
        let interests: BTreeMap<String, _> = load_interests(&self.artifact(INTERESTS))?
            .into_iter()
            .map(|s| (s.item_id.clone(), s))
            .collect();
        let labels: BTreeMap<String, QualityLabel> = load_labels(&self.artifact(LABELS))?
            .into_iter()
            .map(|l| (l.item_id.clone(), l))
            .collect();
        let gw = self.gateway()?;
        let v = &self.cfg.variant;
        let mut records = Vec::with_capacity(catalog.len());
        for item in catalog.iter() {
            let visual = visuals.get(&item.item_id).filter(|_| v.visual_in_embedding);
            let unified = unified_multimodal_text(item, visual)?;
            let enhanced = match interests.get(&item.item_id) {
                Some(set) if v.use_dcim => {
                    let keep = labels
                        .get(&item.item_id)
                        .and_then(|l| l.per_interest.as_deref())
                        .filter(|_| self.cfg.labels.filter_embedding);
                    interest_enhanced_text(&unified, set, keep, self.cfg.mining.max_interests)?
                }
                _ => crate::dcim::InterestEnhancedText {
                    item_id: unified.item_id.clone(),
                    text: unified.text.clone(),
                },
            };
            records.push(EmbeddingRecord {
                item_id: item.item_id.clone(),
                values: embed_deep(&enhanced, &gw)?.into_values(),
            });
        }
        jsonl::write_records(&self.artifact(EMBEDDINGS), &records)
    }

    pub fn embeddings(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        Ok(jsonl::read_records::<EmbeddingRecord>(&self.artifact(EMBEDDINGS))?
            .into_iter()
            .map(|r| (r.item_id, r.values))
            .collect())
    }

    fn quantize(&self) -> Result<()> {
        let q = &self.cfg.quantizer;
        let emb = self.embeddings()?;
        let data: Vec<Vec<f64>> = emb.values().cloned().collect();
        let map = match q.method {
            QuantizerMethod::RqKmeans => {
                let cfg = KMeansConfig {
                    h: q.h,
                    k: q.k,
                    max_iters: q.max_iters,
                    tol: q.tol,
                    seed: q.seed,
                };
                let cb = train_rq_kmeans(&data, &cfg)?;
                save_codebooks(&cb, &self.artifact(CODEBOOKS))?;
                assign_sids(&emb, &cb)?
            }
            QuantizerMethod::RqVae => {
                let cfg = RqVaeConfig {
                    h: q.h,
                    k: q.k,
                    d_lat: q.vae_d_lat,
                    lr: q.vae_lr,
                    epochs: q.vae_epochs,
                    batch_size: q.vae_batch_size,
                    seed: q.seed,
                    ..RqVaeConfig::default()
                };
                let model = train_rq_vae(&data, &cfg)?;
                save_rq_vae(&model, &self.artifact(RQVAE))?;
                assign_sids(&emb, &model)?
            }
        };
        log::info!("{} items, {} with a dedup suffix", map.len(), map.suffixed());
        map.save(&self.artifact(SID_MAP))
    }

    pub fn sid_map(&self) -> Result<SidMap> {
        SidMap::load(&self.artifact(SID_MAP), self.cfg.quantizer.h)
    }

    pub fn vocab(&self) -> Result<(SidMap, Vocabulary)> {
        let map = self.sid_map()?;
        let vocab = build_vocab(&map)?;
        Ok((map, vocab))
    }

    fn train_sft(&self) -> Result<()> {
        let (map, vocab) = self.vocab()?;
        let splits = self.splits()?;
        let data = sft_examples(&splits, &map, &vocab, self.cfg.model.context)?;
        let m = &self.cfg.model;
        let mut model = SidModel::new(ModelConfig {
            vocab_size: vocab.len(),
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            context: m.context,
            seed: m.seed,
            head_init_std: m.head_init_std,
        })?;
        log::info!("sft: {} examples, {} parameters", data.len(), model.num_params());
        let report = sft_train(&mut model, &data, &self.cfg.sft)?;
        let extra = serde_json::json!({ "stage": "sft", "epoch_losses": report.epoch_losses });
        save_checkpoint(&model, &vocab, extra, &self.artifact(SFT_CKPT))
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        let g = &self.cfg.grpo;
        GrpoConfig {
            lr: g.lr,
            epochs: g.epochs,
            batch_prompts: g.batch_prompts,
            max_steps: g.max_steps,
            seed: g.seed,
            reward: RewardConfig {
                alpha: g.alpha,
                beta: g.beta,
                group_size: g.group_size,
                std_epsilon: g.std_epsilon,
                temperature: g.temperature,
                mode: g.reward_mode,
            },
            kl_mode: g.kl_mode,
        }
    }

    pub fn labels_by_item(&self) -> Result<BTreeMap<String, u8>> {
        Ok(load_labels(&self.artifact(LABELS))?
            .into_iter()
            .map(|l| (l.item_id, l.label))
            .collect())
    }

    fn train_grpo(&self) -> Result<()> {
        let (map, vocab) = self.vocab()?;
        let splits = self.splits()?;
        let trie = build_sid_trie(&map, &vocab)?;
        let (reference, _) = load_checkpoint(&self.artifact(SFT_CKPT), &vocab)?;
        let labels = self.labels_by_item()?;
        let max_len = reference.config().context - trie.max_depth();
        let prompts = grpo_prompts(&splits, &map, &vocab, max_len)?;
        let cooccur = (self.cfg.grpo.reward_mode == RewardMode::Collaborative).then(|| CoOccurrence::from_splits(&splits));
        let ctx = GrpoContext {
            trie: &trie,
            map: &map,
            labels: &labels,
            cooccur: cooccur.as_ref(),
        };
        let mut policy = reference.clone();
        log::info!("grpo: {} prompts", prompts.len());
        let report = train_grpo(&mut policy, &reference, &prompts, &ctx, &self.grpo_config())?;
        jsonl::write_records(&self.artifact(GRPO_LOG), &report.steps)?;
        let extra = serde_json::json!({ "stage": "grpo", "steps": report.steps.len() });
        save_checkpoint(&policy, &vocab, extra, &self.artifact(GRPO_CKPT))
    }

    /// Model evaluation reads: GRPO output, or SFT when GRPO is disabled.
    pub fn final_model(&self) -> Result<(SidModel, SidMap, Vocabulary)> {
        let (map, vocab) = self.vocab()?;
        let (ckpt, producer) = self.final_checkpoint();
        let path = self.artifact(ckpt);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: producer.name().to_string(),
                path,
            });
        }
        let (model, _) = load_checkpoint(&path, &vocab)?;
        Ok((model, map, vocab))
    }

    fn eval(&self) -> Result<()> {
        let (model, map, vocab) = self.final_model()?;
        let splits = self.splits()?;
        let trie = build_sid_trie(&map, &vocab)?;
        let report = evaluate(&model, &vocab, &splits.test, &trie, &map, &self.cfg.eval, &self.cfg.fingerprint())?;
        for m in &report.metrics {
            log::info!("HR@{k} {hr:.4}  NDCG@{k} {nd:.4}", k = m.k, hr = m.hr, nd = m.ndcg);
        }
        report.save(&self.artifact(REPORT))
    }
}

/// One next-item example per position of each training sequence.
pub fn sft_examples(splits: &SplitBundle, map: &SidMap, vocab: &Vocabulary, context: usize) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for seq in splits.train.values() {
        for j in 1..seq.len() {
            out.push(encode_sequence(&seq[..j], Some(&seq[j]), map, vocab, context)?);
        }
    }
    Ok(out)
}

/// The SFT examples as prompts (history only) with their targets.
pub fn grpo_prompts(splits: &SplitBundle, map: &SidMap, vocab: &Vocabulary, max_len: usize) -> Result<Vec<GrpoPrompt>> {
    let mut out = Vec::new();
    for seq in splits.train.values() {
        for j in 1..seq.len() {
            out.push(GrpoPrompt {
                ids: encode_sequence(&seq[..j], None, map, vocab, max_len)?.ids,
                target: seq[j].clone(),
            });
        }
    }
    Ok(out)
}
