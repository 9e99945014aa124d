use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SidModel, TokenSequence};
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 3,
            batch_size: 16,
            seed: 0,
            max_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean per-token NLL of each optimizer step, before its update.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Mean per-token NLL over the target spans of `data`.
pub fn mean_nll(model: &SidModel, data: &[TokenSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for s in data {
        total += model.target_nll(&s.ids, s.target_start, s.target_len, None)?;
        count += s.target_len;
    }
    Ok(total / count.max(1) as f64)
}

/// Minimises target-span NLL with Adam. Batches are drawn from a seeded
/// shuffle, so the result depends only on the inputs.
pub fn sft_train(model: &mut SidModel, data: &[TokenSequence], cfg: &SftConfig) -> Result<SftReport> {
    if data.is_empty() {
        return Err(Error::Invalid("empty SFT dataset".into()));
    }
    if let Some(s) = data.iter().find(|s| s.target_len == 0) {
        return Err(Error::Invalid(format!("training sequence without target: {:?}", s.ids)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = SftReport::default();
    let mut grad = vec![0.0; model.num_params()];
    let mut steps = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ep_nll, mut ep_tok) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let tokens: usize = batch.iter().map(|&i| data[i].target_len).sum();
            let scale = 1.0 / tokens as f64;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut nll = 0.0;
            for &i in batch {
                let s = &data[i];
                nll += model.target_nll(&s.ids, s.target_start, s.target_len, Some((&mut grad, scale)))?;
            }
            if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("sft epoch {epoch} step {steps}: loss {nll}")));
            }
            opt.step(model.params_mut(), &grad);
            report.step_losses.push(nll * scale);
            ep_nll += nll;
            ep_tok += tokens;
            steps += 1;
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                report.epoch_losses.push(ep_nll / ep_tok as f64);
                break 'epochs;
            }
        }
        let loss = ep_nll / ep_tok as f64;
        log::info!("sft epoch {epoch}: mean nll {loss:.4}");
        report.epoch_losses.push(loss);
    }
    Ok(report)
}
