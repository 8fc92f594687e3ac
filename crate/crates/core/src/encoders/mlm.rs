use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Encoder;
use crate::error::{bail, Result};
use crate::numerics::{Module, Optimizer, Scalar, Tape};
use crate::seed::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_rate: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_token: u32,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            steps: 2000,
            learning_rate: 5e-4,
            batch_size: 8,
            mask_token: crate::tasks::MASK_TOKEN,
            seed: 0,
        }
    }
}

/// Masked-token pretraining with an output head tied to the token
/// embedding table. Returns the mean batch loss of every step.
pub fn mlm_pretrain<T: Scalar>(enc: &mut Encoder<T>, corpus: &[Vec<u32>], cfg: &MlmConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() || corpus.iter().any(Vec::is_empty) {
        bail!(Data, "masked-LM pretraining needs a non-empty corpus of non-empty sequences");
    }
    if !(cfg.mask_rate > 0.0 && cfg.mask_rate < 1.0) {
        bail!(Config, "mask_rate must be in (0, 1), got {}", cfg.mask_rate);
    }
    if cfg.mask_token as usize >= enc.config().vocab_size {
        bail!(Config, "mask token {} outside vocabulary", cfg.mask_token);
    }
    if cfg.batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    let mut rng = rng(cfg.seed);
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    let ignore = usize::MAX;
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let seq = &corpus[rng.random_range(0..corpus.len())];
            let mut masked = seq.clone();
            let mut labels = vec![ignore; seq.len()];
            for (i, tok) in masked.iter_mut().enumerate() {
                if rng.random_bool(cfg.mask_rate) {
                    labels[i] = *tok as usize;
                    *tok = cfg.mask_token;
                }
            }
            if labels.iter().all(|&l| l == ignore) {
                let i = rng.random_range(0..seq.len());
                labels[i] = seq[i] as usize;
                masked[i] = cfg.mask_token;
            }
            let hidden = enc.forward(&tape, &masked)?;
            let logits = tape.matmul_bt(hidden, tape.param(&enc.token_embedding))?;
            let loss = tape.cross_entropy(logits, &labels, Some(ignore))?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let loss = tape.scale(total.expect("batch_size > 0"), T::of(1.0 / cfg.batch_size as f64));
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            bail!(Divergence, "masked-LM loss became {value}");
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        enc.accumulate_grads(&grads);
        opt.step(enc.named_params_mut().into_iter().map(|(_, p)| p))?;
    }
    Ok(losses)
}
