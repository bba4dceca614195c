//! Branch-train-merge orchestration: budgets, branching experts from a
//! seed, independent training rounds, merging into an expert set, and
//! adaptation rounds that branch new experts from donor experts.

mod branch;
mod budget;
mod manifest;
mod round;
mod set;

pub use branch::{branch, branch_dense, branch_from, hmr_branch, select_donor, HmrCluster};
pub use budget::{plan_budget, BudgetPlan, ComputeLayout};
pub use manifest::{ExpertManifest, ExpertScope, SeedCheckpoint};
pub use round::{pretrain_seed, train_expert, train_round, RoundConfig};
pub use set::{merge, ExpertSet, LineageEdge};
