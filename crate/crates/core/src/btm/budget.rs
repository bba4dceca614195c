use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An equal split of a total token budget across `k` experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total_tokens: u64,
    pub k: usize,
    /// `floor(total_tokens / k)`.
    pub per_expert_tokens: u64,
    /// `total_tokens - k * per_expert_tokens`.
    pub shortfall: u64,
}

impl BudgetPlan {
    /// Optimizer steps per expert for a given batch size in tokens.
    pub fn steps_per_expert(&self, batch_tokens: usize) -> u64 {
        if batch_tokens == 0 {
            0
        } else {
            self.per_expert_tokens / batch_tokens as u64
        }
    }
}

pub fn plan_budget(total_tokens: u64, k: usize) -> Result<BudgetPlan> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if total_tokens < k as u64 {
        return Err(Error::InvalidArgument(format!(
            "total budget {total_tokens} is smaller than k = {k}"
        )));
    }
    let per_expert_tokens = total_tokens / k as u64;
    Ok(BudgetPlan {
        total_tokens,
        k,
        per_expert_tokens,
        shortfall: total_tokens - per_expert_tokens * k as u64,
    })
}

/// Hardware layout of one training setting: tokens are the product of all
/// factors divided by the model-parallel degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLayout {
    pub experts: u64,
    pub gpus_per_expert: u64,
    pub updates: u64,
    pub grad_accumulation: u64,
    pub batch_size: u64,
    pub seq_len: u64,
    pub model_parallel: u64,
}

impl ComputeLayout {
    pub fn total_tokens(&self) -> u64 {
        self.experts
            * self.gpus_per_expert
            * self.updates
            * self.grad_accumulation
            * self.batch_size
            * self.seq_len
            / self.model_parallel
    }

    pub fn tokens_per_expert(&self) -> u64 {
        self.total_tokens() / self.experts
    }
}
