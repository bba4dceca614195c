//! Read the bundled JSONL corpus, split it per language and print counts.
//!
//! `cargo run --release --example corpus_ingest [-- CORPUS.jsonl]`

use std::path::PathBuf;

use xelm::corpus::{
    stream_batches, CorpusStore, DocFilter, IngestConfig, StreamConfig, TokenizerSpec,
};

fn main() -> xelm::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic.jsonl"));
    let store = CorpusStore::ingest(&path, &IngestConfig::default())?.make_split(0.1, 7)?;

    println!(
        "{:<6} {:>6} {:>10} {:>6} {:>6}",
        "lang", "docs", "tokens", "train", "valid"
    );
    for (lang, c) in store.counts() {
        println!(
            "{:<6} {:>6} {:>10} {:>6} {:>6}",
            lang, c.documents, c.tokens, c.train_documents, c.valid_documents
        );
    }

    // Training sees fixed-length windows of byte tokens with BOS/EOS per document.
    let mut batches = stream_batches(
        &store,
        &DocFilter::All,
        StreamConfig {
            seq_len: 48,
            batch_size: 1,
            seed: 0,
            repeat: false,
        },
    )?;
    let first = batches.next().expect("a non-empty corpus yields a batch");
    println!(
        "\nfirst training window: {:?}",
        TokenizerSpec::default().decode(&first.tokens)
    );
    Ok(())
}
