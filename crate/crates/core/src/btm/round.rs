use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use super::budget::BudgetPlan;
use super::manifest::{ExpertManifest, ExpertScope};
use crate::allocation::Allocation;
use crate::corpus::{stream_batches, CorpusStore, DocFilter, StreamConfig};
use crate::error::{Error, Result};
use crate::lm::{checkpoint, train, LmParams, OptimizerConfig, TrainConfig};
use crate::seeding::derive_seed;

/// Shared settings of one training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub plan: BudgetPlan,
    pub seq_len: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Per-expert seeds are derived from this and the expert id.
    pub global_seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub log_every: usize,
}

fn data_filter(expert: &ExpertManifest, allocation: Option<&Allocation>) -> Result<DocFilter> {
    match &expert.scope {
        ExpertScope::Languages { languages } => Ok(DocFilter::Languages(languages.clone())),
        ExpertScope::DataShare { .. } => {
            let alloc = allocation.ok_or_else(|| Error::EmptyExpertStream {
                expert: expert.expert_id.clone(),
                reason: "cluster-scoped expert needs a document allocation".into(),
            })?;
            Ok(alloc.filter_for(expert.cluster_index))
        }
    }
}

/// Train one expert from its current checkpoint; a pure function of the
/// checkpoint, its data, the round config and the expert id.
pub fn train_expert(
    store: &CorpusStore,
    allocation: Option<&Allocation>,
    expert: &ExpertManifest,
    cfg: &RoundConfig,
) -> Result<ExpertManifest> {
    let seed = derive_seed(cfg.global_seed, &expert.expert_id);
    let filter = data_filter(expert, allocation)?;
    let stream = stream_batches(
        store,
        &filter,
        StreamConfig {
            seq_len: cfg.seq_len,
            batch_size: cfg.batch_size,
            seed: derive_seed(seed, "stream"),
            repeat: true,
        },
    )
    .map_err(|e| match e {
        Error::EmptySelection(reason) => Error::EmptyExpertStream {
            expert: expert.expert_id.clone(),
            reason,
        },
        other => other,
    })?;
    let params: LmParams<f32> = checkpoint::load(&expert.checkpoint)?;
    let (params, report) = train(
        params,
        stream,
        &TrainConfig {
            token_budget: cfg.plan.per_expert_tokens,
            optimizer: cfg.optimizer,
            seed: derive_seed(seed, "dropout"),
            log_every: cfg.log_every,
        },
    )?;
    let path = cfg.out_dir.join(format!("{}.ckpt", expert.expert_id));
    let hash = checkpoint::save(&params, &path)?;
    info!(
        "trained {} for {} tokens ({} steps)",
        expert.expert_id, report.tokens_consumed, report.steps
    );
    Ok(ExpertManifest {
        checkpoint: path,
        checkpoint_hash: hash,
        tokens_trained: expert.tokens_trained + report.tokens_consumed,
        report: Some(report),
        ..expert.clone()
    })
}

/// Train every expert independently on its own data with up to
/// `cfg.workers` concurrent jobs. Results do not depend on the worker count.
pub fn train_round(
    store: &CorpusStore,
    allocation: Option<&Allocation>,
    experts: &[ExpertManifest],
    cfg: &RoundConfig,
) -> Result<Vec<ExpertManifest>> {
    // Fail fast on empty streams before any compute is spent.
    for e in experts {
        let filter = data_filter(e, allocation)?;
        if !store
            .train_documents()
            .any(|d| filter.accepts(&d.id, &d.lang))
        {
            return Err(Error::EmptyExpertStream {
                expert: e.expert_id.clone(),
                reason: format!("no training documents match {filter:?}"),
            });
        }
    }
    let workers = cfg.workers.clamp(1, experts.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<ExpertManifest>>>> =
        experts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(expert) = experts.get(i) else { break };
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    train_expert(store, allocation, expert, cfg)
                }))
                .unwrap_or_else(|_| Err(Error::WorkerPanic(expert.expert_id.clone())));
                *results[i].lock().expect("result slot") = Some(outcome);
            });
        }
    });
    results
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot")
                .expect("every job ran")
        })
        .collect()
}

/// Pretrain a seed model from scratch on every language of the store.
pub fn pretrain_seed(
    store: &CorpusStore,
    lm: &crate::lm::LmConfig,
    cfg: &RoundConfig,
    path: &Path,
) -> Result<(String, crate::lm::TrainReport)> {
    let params = crate::lm::init_params::<f32>(lm, derive_seed(cfg.global_seed, "seed-init"))?;
    let stream = stream_batches(
        store,
        &DocFilter::All,
        StreamConfig {
            seq_len: cfg.seq_len,
            batch_size: cfg.batch_size,
            seed: derive_seed(cfg.global_seed, "seed-stream"),
            repeat: true,
        },
    )?;
    let (params, report) = train(
        params,
        stream,
        &TrainConfig {
            token_budget: cfg.plan.per_expert_tokens,
            optimizer: cfg.optimizer,
            seed: derive_seed(cfg.global_seed, "seed-dropout"),
            log_every: cfg.log_every,
        },
    )?;
    let hash = checkpoint::save(&params, path)?;
    Ok((hash, report))
}
