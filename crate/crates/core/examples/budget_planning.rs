//! Split a token budget evenly across experts and derive budgets from a
//! hardware layout.
//!
//! `cargo run --example budget_planning [-- TOTAL_TOKENS]`

use xelm::btm::{plan_budget, ComputeLayout};

fn main() -> xelm::Result<()> {
    let total: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("an integer token count"))
        .unwrap_or(10_500_000_000);
    println!(
        "{:>3} {:>16} {:>10} {:>14}",
        "k", "per expert", "shortfall", "steps @ 4x2048"
    );
    for k in [1, 2, 4, 8, 16] {
        let plan = plan_budget(total, k)?;
        println!(
            "{k:>3} {:>16} {:>10} {:>14}",
            plan.per_expert_tokens,
            plan.shortfall,
            plan.steps_per_expert(4 * 2048)
        );
    }

    let layout = ComputeLayout {
        experts: 8,
        gpus_per_expert: 4,
        updates: 20_000,
        grad_accumulation: 8,
        batch_size: 2,
        seq_len: 2048,
        model_parallel: 2,
    };
    println!(
        "\n{layout:?}\n  total {} tokens, {} per expert",
        layout.total_tokens(),
        layout.tokens_per_expert()
    );
    Ok(())
}
