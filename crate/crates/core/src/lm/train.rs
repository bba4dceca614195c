use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::params_hash;
use super::model::loss_and_grads_with;
use super::optim::{adam_step, OptimizerConfig, OptimizerState};
use super::{LmParams, Real};
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Target tokens to consume; rounded down to whole batches.
    pub token_budget: u64,
    pub optimizer: OptimizerConfig,
    /// Seeds dropout masks; irrelevant when dropout is 0.
    pub seed: u64,
    /// Record the loss every `log_every` steps (and at the last step).
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub tokens_consumed: u64,
    pub steps: usize,
    pub requested_tokens: u64,
    /// `requested_tokens - tokens_consumed`, from rounding to whole batches.
    pub shortfall: u64,
    pub loss_trace: Vec<LossPoint>,
    pub checkpoint_hash: String,
}

/// Number of whole batches that fit into `budget`.
pub fn steps_for_budget(budget: u64, batch_tokens: usize) -> usize {
    if batch_tokens == 0 {
        0
    } else {
        (budget / batch_tokens as u64) as usize
    }
}

/// Train `params` on `stream` until the (rounded) token budget is spent.
///
/// Every batch drawn from the stream must have the shape of the first one.
pub fn train<F: Real>(
    mut params: LmParams<F>,
    stream: impl IntoIterator<Item = TokenBatch>,
    config: &TrainConfig,
) -> Result<(LmParams<F>, TrainReport)> {
    let mut stream = stream.into_iter().peekable();
    let batch_tokens = match stream.peek() {
        Some(b) => b.batch_size * b.seq_len,
        None if config.token_budget == 0 => 0,
        None => {
            return Err(Error::StreamExhausted {
                consumed: 0,
                budget: config.token_budget,
            })
        }
    };
    let steps = steps_for_budget(config.token_budget, batch_tokens);
    let planned = steps as u64 * batch_tokens as u64;
    let shortfall = config.token_budget - planned;
    if shortfall > 0 {
        warn!(
            "token budget {} is not a multiple of {batch_tokens} batch tokens; training on {planned}",
            config.token_budget
        );
    }
    let mut opt = OptimizerState::new(&params, config.optimizer, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let use_dropout = params.config.dropout > 0.0;
    let log_every = config.log_every.max(1);
    let mut consumed = 0u64;
    let mut loss_trace = Vec::new();

    for step in 0..steps {
        let batch = stream.next().ok_or(Error::StreamExhausted {
            consumed,
            budget: planned,
        })?;
        if batch.batch_size * batch.seq_len != batch_tokens {
            return Err(Error::DimensionMismatch(format!(
                "batch {step} holds {} tokens, expected {batch_tokens}",
                batch.batch_size * batch.seq_len
            )));
        }
        let (loss, grads) = loss_and_grads_with(&params, &batch, use_dropout.then_some(&mut rng))?;
        adam_step(&mut params, &grads, &mut opt)?;
        consumed += batch_tokens as u64;
        if step % log_every == 0 || step + 1 == steps {
            loss_trace.push(LossPoint { step, loss });
            info!("step {step}/{steps} loss {loss:.4}");
        }
    }

    let report = TrainReport {
        tokens_consumed: consumed,
        steps,
        requested_tokens: config.token_budget,
        shortfall,
        loss_trace,
        checkpoint_hash: params_hash(&params),
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_params, LmConfig};

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 259,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
            dropout: 0.0,
        }
    }

    fn batches() -> impl Iterator<Item = TokenBatch> {
        let ids: Vec<u32> = (0..9).map(|i| 97 + i).collect();
        std::iter::repeat_with(move || TokenBatch::from_sequence(&ids).unwrap())
    }

    fn train_cfg(budget: u64) -> TrainConfig {
        TrainConfig {
            token_budget: budget,
            optimizer: OptimizerConfig::desk(),
            seed: 0,
            log_every: 1,
        }
    }

    #[test]
    fn budget_rounds_down_and_records_shortfall() {
        let p = init_params::<f32>(&cfg(), 0).unwrap();
        let (_, r) = train(p, batches(), &train_cfg(20)).unwrap();
        assert_eq!((r.steps, r.tokens_consumed, r.shortfall), (2, 16, 4));
        assert_eq!(r.loss_trace.len(), 2);
    }

    #[test]
    fn short_stream_is_an_error() {
        let p = init_params::<f32>(&cfg(), 0).unwrap();
        let err = train(p, batches().take(2), &train_cfg(32)).unwrap_err();
        assert!(matches!(
            err,
            Error::StreamExhausted {
                consumed: 16,
                budget: 32
            }
        ));
    }

    #[test]
    fn same_seed_same_hash() {
        let mut c = cfg();
        c.dropout = 0.1;
        let run = || {
            let p = init_params::<f32>(&c, 4).unwrap();
            train(p, batches(), &train_cfg(80))
                .unwrap()
                .1
                .checkpoint_hash
        };
        assert_eq!(run(), run());
    }
}
