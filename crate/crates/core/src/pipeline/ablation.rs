use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::{Pipeline, PipelineConfig, MANIFEST_DIR};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDcim,
    NoCmsa,
    NoQarmReward,
    SftOnly,
    TextOnly,
    RewardBinary,
    RewardCollaborative,
    RewardPrefixMatch,
    LabelsRule,
    LabelsRandom,
    LabelsUniform,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::Full,
        Variant::NoDcim,
        Variant::NoCmsa,
        Variant::NoQarmReward,
        Variant::SftOnly,
        Variant::TextOnly,
        Variant::RewardBinary,
        Variant::RewardCollaborative,
        Variant::RewardPrefixMatch,
        Variant::LabelsRule,
        Variant::LabelsRandom,
        Variant::LabelsUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDcim => "no_dcim",
            Variant::NoCmsa => "no_cmsa",
            Variant::NoQarmReward => "no_qarm_reward",
            Variant::SftOnly => "sft_only",
            Variant::TextOnly => "text_only",
            Variant::RewardBinary => "reward_binary",
            Variant::RewardCollaborative => "reward_collaborative",
            Variant::RewardPrefixMatch => "reward_prefix_match",
            Variant::LabelsRule => "labels_rule",
            Variant::LabelsRandom => "labels_random",
            Variant::LabelsUniform => "labels_uniform",
        }
    }

    /// The `key=value` overrides the variant applies to the base config.
    pub fn overrides(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Variant::Full => &[],
            Variant::NoDcim => &[("variant.use_dcim", "false")],
            Variant::NoCmsa => &[("variant.visual_in_embedding", "false")],
            Variant::NoQarmReward => &[("grpo.alpha", "0.0")],
            Variant::SftOnly => &[("variant.run_grpo", "false")],
            Variant::TextOnly => &[("variant.visual_in_embedding", "false"), ("variant.visual_in_mining", "false")],
            Variant::RewardBinary => &[("grpo.reward_mode", "binary")],
            Variant::RewardCollaborative => &[("grpo.reward_mode", "collaborative")],
            Variant::RewardPrefixMatch => &[("grpo.reward_mode", "prefix_match")],
            Variant::LabelsRule => &[("labels.source", "rule")],
            Variant::LabelsRandom => &[("labels.source", "random")],
            Variant::LabelsUniform => &[("labels.source", "uniform")],
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        for (k, v) in self.overrides() {
            cfg = cfg.with_override(k, v)?;
        }
        Ok(cfg)
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

fn copy_missing(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io(dst, e))?;
    for entry in std::fs::read_dir(src).map_err(|e| Error::io(src, e))? {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let to = dst.join(entry.file_name());
        let from = entry.path();
        if from.is_dir() {
            copy_missing(&from, &to)?;
        } else if !to.exists() {
            std::fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    variant: &'static str,
    report: &'a MetricsReport,
}

/// Runs each variant in `<work_dir>/ablation/<variant>`. Artifacts of the
/// `full` run seed the other directories, so only stages whose settings or
/// inputs differ are recomputed.
pub fn run_ablation(base: &PipelineConfig, variants: &[Variant]) -> Result<Vec<(Variant, MetricsReport)>> {
    let root = base.paths.work_dir.join("ablation");
    let full_dir = root.join(Variant::Full.name());
    let mut ordered = variants.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut out = Vec::with_capacity(ordered.len());
    for v in ordered {
        let mut cfg = v.apply(base)?;
        cfg.paths.work_dir = root.join(v.name());
        if v != Variant::Full && full_dir.join(MANIFEST_DIR).exists() {
            copy_missing(&full_dir, &cfg.paths.work_dir)?;
        }
        log::info!("ablation variant {}", v.name());
        let report = Pipeline::new(cfg)?.run_all()?;
        out.push((v, report));
    }
    let rows: Vec<SummaryRow<'_>> = out.iter().map(|(v, r)| SummaryRow { variant: v.name(), report: r }).collect();
    let p = root.join("summary.json");
    let mut text = serde_json::to_string_pretty(&rows).expect("summary serializes");
    text.push('\n');
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}
