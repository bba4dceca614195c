//! Train a small byte-level transformer on one language and report its
//! perplexity on held-out text of every language.
//!
//! `cargo run --release --example train_language_model`

use std::path::PathBuf;

use xelm::corpus::{
    stream_batches, CorpusStore, DocFilter, IngestConfig, LanguageTag, StreamConfig,
};
use xelm::lm::{init_params, perplexity, train, LmConfig, OptimizerConfig, TrainConfig};

fn main() -> xelm::Result<()> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic.jsonl");
    let store = CorpusStore::ingest(&path, &IngestConfig::default())?.make_split(0.1, 7)?;
    let lm = LmConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 64,
        ..LmConfig::desk()
    };
    println!("{} parameters", lm.parameter_count());

    let only_l2 = DocFilter::Languages([LanguageTag::from("l2")].into());
    let stream = stream_batches(
        &store,
        &only_l2,
        StreamConfig {
            seq_len: 64,
            batch_size: 4,
            seed: 0,
            repeat: true,
        },
    )?;
    let params = init_params::<f32>(&lm, 0)?;
    let optimizer = OptimizerConfig {
        max_lr: 3e-3,
        ..OptimizerConfig::desk()
    };
    let (params, report) = train(
        params,
        stream,
        &TrainConfig {
            token_budget: 300 * 256,
            optimizer,
            seed: 0,
            log_every: 50,
        },
    )?;
    for p in &report.loss_trace {
        println!("step {:>4}  loss {:.3}", p.step, p.loss);
    }

    // The model should be best on the language it saw and its close relative.
    for (lang, docs) in store.valid_by_language() {
        let ppl = perplexity(&params, docs.iter().map(|d| d.text.as_str()))?;
        println!("{lang}: perplexity {ppl:.2}");
    }
    Ok(())
}
