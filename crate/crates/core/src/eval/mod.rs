//! Evaluation: perplexity tables, forgetting matrices, rank correlations,
//! in-context-learning scoring and report files.

mod forgetting;
mod icl;
mod ppl;
mod report;
mod stats;

pub use forgetting::{
    forgetting, forgetting_from_checkpoints, ForgettingMatrix, ForgettingSummary,
};
pub use icl::{
    icl_evaluate, predict, EnsembleScorer, IclConfig, IclExample, IclRecord, IclResult, IclTask,
    ScoreScope, SequenceScorer, MASK,
};
pub use ppl::{hmr_select, ppl_table, PplCell, PplReport, PplSources, Setting};
pub use report::{emit_report, ImprovementPoint, Report, ReportSummary};
pub use stats::{average_ranks, spearman};
