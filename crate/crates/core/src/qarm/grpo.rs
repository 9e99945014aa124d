use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_kl, group_advantages, kl_token, reward, CoOccurrence, RewardConfig};
use crate::error::{Error, Result};
use crate::genmodel::{constrained_log_probs, sample_group, Forward, Sample, SidModel, SidTrie};
use crate::optim::Adam;
use crate::quantizer::SidMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `exp(ref - pol) - (ref - pol) - 1` on the sampled tokens.
    #[default]
    Estimator,
    /// Full KL between the constrained next-token distributions along each
    /// sampled path. Slow; meant for debugging.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_prompts: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub seed: u64,
    pub reward: RewardConfig,
    pub kl_mode: KlMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 2,
            batch_prompts: 8,
            max_steps: 0,
            seed: 0,
            reward: RewardConfig::default(),
            kl_mode: KlMode::Estimator,
        }
    }
}

/// Everything the reward needs besides the samples.
pub struct GrpoContext<'a> {
    pub trie: &'a SidTrie,
    pub map: &'a SidMap,
    pub labels: &'a BTreeMap<String, u8>,
    pub cooccur: Option<&'a CoOccurrence>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrpoPrompt {
    /// `BOS history SEP`.
    pub ids: Vec<usize>,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub mean_reward: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoReport {
    pub steps: Vec<StepMetrics>,
}

struct Group<'a> {
    prompt: &'a GrpoPrompt,
    samples: Vec<Sample>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
}

/// Constrained (T = 1) log-probs of the sampled tokens, plus the full
/// constrained distributions and allowed sets per step.
struct PathEval {
    allowed: Vec<Vec<usize>>,
    lps: Vec<Vec<f64>>,
    picks: Vec<usize>,
    fw: Forward,
}

fn eval_path(model: &SidModel, prompt: &[usize], tokens: &[usize], trie: &SidTrie) -> Result<PathEval> {
    let mut ids = prompt.to_vec();
    ids.extend(&tokens[..tokens.len() - 1]);
    let fw = model.forward(&ids)?;
    let mut node = SidTrie::ROOT;
    let (mut allowed, mut lps, mut picks) = (Vec::new(), Vec::new(), Vec::new());
    for (s, &tok) in tokens.iter().enumerate() {
        let logits = model.logits_at(&fw, prompt.len() - 1 + s);
        let a: Vec<usize> = trie.children(node).map(|(t, _)| t).collect();
        let pick = a
            .iter()
            .position(|&t| t == tok)
            .ok_or_else(|| Error::Invalid(format!("token {tok} leaves the SID trie")))?;
        lps.push(constrained_log_probs(&logits, &a, 1.0));
        picks.push(pick);
        allowed.push(a);
        node = trie.child(node, tok).expect("checked above");
    }
    Ok(PathEval { allowed, lps, picks, fw })
}

/// Surrogate loss and its gradient for fixed groups.
fn surrogate(
    policy: &SidModel,
    reference: &SidModel,
    groups: &[Group<'_>],
    trie: &SidTrie,
    beta: f64,
    kl_mode: KlMode,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    let n_tokens: usize = groups.iter().flat_map(|g| &g.samples).map(|s| s.tokens.len()).sum();
    let n = n_tokens.max(1) as f64;
    let mut pg = 0.0;
    let mut kl_total = 0.0;
    for g in groups {
        let kl_w = beta / (groups.len() * g.samples.len()) as f64;
        for (sample, &adv) in g.samples.iter().zip(&g.advantages) {
            let pol = eval_path(policy, &g.prompt.ids, &sample.tokens, trie)?;
            let refp = eval_path(reference, &g.prompt.ids, &sample.tokens, trie)?;
            let mut dl = Vec::with_capacity(sample.tokens.len());
            let mut kl_sample = 0.0;
            for s in 0..sample.tokens.len() {
                let (lp, rp, pick) = (&pol.lps[s], &refp.lps[s], pol.picks[s]);
                pg += adv * lp[pick];
                // d loss / d logit over the allowed set
                let mut d: Vec<f64> = match kl_mode {
                    KlMode::Estimator => {
                        kl_sample += kl_token(lp[pick], rp[pick]);
                        let w = -adv / n + kl_w * (1.0 - (rp[pick] - lp[pick]).exp());
                        lp.iter().enumerate().map(|(i, l)| w * (f64::from(u8::from(i == pick)) - l.exp())).collect()
                    }
                    KlMode::Exact => {
                        let kl = exact_kl(lp, rp);
                        kl_sample += kl;
                        lp.iter()
                            .zip(rp)
                            .enumerate()
                            .map(|(i, (l, r))| {
                                let p = l.exp();
                                -adv / n * (f64::from(u8::from(i == pick)) - p) + kl_w * p * (l - r - kl)
                            })
                            .collect()
                    }
                };
                let mut full = vec![0.0; policy.config().vocab_size];
                for (&t, v) in pol.allowed[s].iter().zip(d.drain(..)) {
                    full[t] = v;
                }
                dl.push((g.prompt.ids.len() - 1 + s, full));
            }
            kl_total += kl_sample / (groups.len() * g.samples.len()) as f64;
            policy.backward(&pol.fw, &dl, grad);
        }
    }
    Ok((-pg / n + beta * kl_total, kl_total))
}

fn step_seed(seed: u64, step: usize, j: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step as u64) << 20)
        .wrapping_add(j as u64)
}

/// One GRPO update over a batch of prompts.
pub fn grpo_step(
    policy: &mut SidModel,
    reference: &SidModel,
    prompts: &[GrpoPrompt],
    ctx: &GrpoContext<'_>,
    cfg: &GrpoConfig,
    opt: &mut Adam,
    step: usize,
) -> Result<StepMetrics> {
    let rc = &cfg.reward;
    let mut groups = Vec::with_capacity(prompts.len());
    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    for (j, p) in prompts.iter().enumerate() {
        let target = ctx.map.get(&p.target).ok_or_else(|| Error::UnknownItem(p.target.clone()))?;
        let samples = sample_group(policy, &p.ids, ctx.trie, rc.group_size, rc.temperature, step_seed(cfg.seed, step, j))?;
        let rewards: Vec<f64> = samples
            .iter()
            .map(|s| {
                let sid = ctx.map.get(&s.item).expect("trie leaves are catalog items");
                reward(sid, target, ctx.map, ctx.labels, rc, ctx.cooccur)
            })
            .collect();
        reward_sum += rewards.iter().sum::<f64>();
        reward_n += rewards.len();
        let advantages = group_advantages(&rewards, rc.std_epsilon);
        groups.push(Group { prompt: p, samples, rewards, advantages });
    }
    let mut grad = vec![0.0; policy.num_params()];
    let (loss, kl) = surrogate(policy, reference, &groups, ctx.trie, rc.beta, cfg.kl_mode, &mut grad)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let dump: Vec<String> = groups
            .iter()
            .map(|g| {
                let items: Vec<&str> = g.samples.iter().map(|s| s.item.as_str()).collect();
                format!("target {} items {:?} rewards {:?}", g.prompt.target, items, g.rewards)
            })
            .collect();
        return Err(Error::NonFinite(format!("grpo step {step}: loss {loss}; {}", dump.join("; "))));
    }
    opt.step(policy.params_mut(), &grad);
    Ok(StepMetrics {
        loss,
        mean_reward: reward_sum / reward_n.max(1) as f64,
        kl,
    })
}

/// Runs GRPO over `prompts` for the configured epochs; `reference` stays
/// frozen.
pub fn train_grpo(
    policy: &mut SidModel,
    reference: &SidModel,
    prompts: &[GrpoPrompt],
    ctx: &GrpoContext<'_>,
    cfg: &GrpoConfig,
) -> Result<GrpoReport> {
    if prompts.is_empty() {
        return Err(Error::Invalid("no GRPO prompts".into()));
    }
    if cfg.reward.group_size < 2 {
        return Err(Error::Invalid(format!("group size must be at least 2, got {}", cfg.reward.group_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(policy.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut report = GrpoReport::default();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_prompts.max(1)) {
            let batch: Vec<GrpoPrompt> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let m = grpo_step(policy, reference, &batch, ctx, cfg, &mut opt, report.steps.len())?;
            report.steps.push(m);
            if cfg.max_steps > 0 && report.steps.len() >= cfg.max_steps {
                break 'epochs;
            }
        }
        let tail = &report.steps[report.steps.len().saturating_sub(order.len().div_ceil(cfg.batch_prompts.max(1)))..];
        log::info!(
            "grpo epoch {epoch}: mean reward {:.4}",
            tail.iter().map(|s| s.mean_reward).sum::<f64>() / tail.len().max(1) as f64
        );
    }
    Ok(report)
}
