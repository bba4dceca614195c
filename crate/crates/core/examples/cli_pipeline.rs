//! Drive the whole command pipeline from code, as the `xbtm` binary does:
//! each step records its fingerprint in the workdir and is skipped when
//! its inputs are unchanged.
//!
//! `cargo run --release --example cli_pipeline [-- WORKDIR]`

use std::path::PathBuf;

use xelm::cli::{run, Command, EnsembleArgs, EnsembleMode, Outcome, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let tmp = tempfile::tempdir()?;
    let workdir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    // The bundled config with a smaller model and budget.
    let overrides: Vec<String> = [
        r#"lm={"vocab_size":259,"d_model":32,"n_layers":2,"n_heads":2,"d_ff":64,"max_seq_len":256,"dropout":0.0}"#,
        "training.seq_len=64",
        "training.optimizer.max_lr=0.003",
        "budget.total_tokens=102400",
        "budget.seed_tokens=51200",
        "hmr.total_tokens=25600",
        "eval.icl_runs=1",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    let cfg = RunConfig::load(&data.join("run-typology.json"), &overrides)?;

    let top1 = Command::EvalEnsemble(EnsembleArgs {
        mode: EnsembleMode::Top1,
        temperature: None,
        top_m: None,
        stride: None,
    });
    let steps = [
        Command::Ingest,
        Command::Cluster,
        Command::Plan,
        Command::BranchTrain,
        Command::Merge,
        Command::AdaptHmr,
        Command::EvalPpl,
        top1,
        Command::EvalForgetting,
        Command::EvalIcl,
        Command::Report,
    ];
    for step in &steps {
        match run(step, &cfg, &workdir, false)? {
            Outcome::UpToDate => println!("{}: up to date", step.name()),
            Outcome::Ran { artifacts, summary } => {
                print!("{summary}");
                println!("{}: wrote {} artifacts", step.name(), artifacts.len());
            }
        }
    }
    // A second pass does nothing.
    let rerun = steps
        .iter()
        .filter(|s| matches!(run(s, &cfg, &workdir, false), Ok(Outcome::UpToDate)))
        .count();
    println!("\nsecond pass: {rerun} of {} steps up to date", steps.len());
    Ok(())
}
