//! Few-shot multiple-choice evaluation on the bundled cloze tasks: every
//! choice is scored in context and the most likely one is the prediction.
//!
//! `cargo run --release --example icl_evaluation`

use std::path::PathBuf;

use xelm::btm::{plan_budget, pretrain_seed, RoundConfig};
use xelm::corpus::{CorpusStore, IngestConfig};
use xelm::eval::{icl_evaluate, IclConfig, IclTask, ScoreScope};
use xelm::lm::{checkpoint, init_params, LmConfig, LmParams, OptimizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let tmp = tempfile::tempdir()?;
    let store = CorpusStore::ingest(&data.join("synthetic.jsonl"), &IngestConfig::default())?
        .make_split(0.1, 7)?
        .filter_languages(|l| l.as_str() != "l4");
    let lm = LmConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 256,
        ..LmConfig::desk()
    };
    let cfg = RoundConfig {
        plan: plan_budget(300 * 4 * 128, 1)?,
        seq_len: 128,
        batch_size: 4,
        optimizer: OptimizerConfig {
            max_lr: 3e-3,
            ..OptimizerConfig::desk()
        },
        global_seed: 0,
        workers: 1,
        out_dir: tmp.path().to_path_buf(),
        log_every: 100,
    };
    let path = tmp.path().join("lm.ckpt");
    pretrain_seed(&store, &lm, &cfg, &path)?;
    let trained: LmParams<f32> = checkpoint::load(&path)?;
    let untrained = init_params::<f32>(&lm, 0)?;

    let scoring = IclConfig {
        scope: ScoreScope::Completion,
        length_normalize: true,
    };
    for lang in ["l0", "l2"] {
        let task: IclTask = serde_json::from_str(&std::fs::read_to_string(
            data.join(format!("tasks/cloze-{lang}.json")),
        )?)?;
        for shots in [0, 2] {
            let before = icl_evaluate(&untrained, &task, shots, 3, 0, &scoring)?;
            let after = icl_evaluate(&trained, &task, shots, 3, 0, &scoring)?;
            println!(
                "{:<10} {shots}-shot  untrained {:.3}  trained {:.3} (runs {:?})",
                task.name, before.accuracy, after.accuracy, after.run_accuracies
            );
        }
    }
    Ok(())
}
