//! Regenerate the bundled synthetic data under `crates/core/data/`:
//! the corpus, letter-profile features, cloze tasks and run configs.
//!
//! `cargo run --example make_synthetic_data [-- OUT_DIR]`

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde_json::json;
use xelm::corpus::LanguageTag;
use xelm::synthetic::{cloze_task, generate, letter_profile_features, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data"));
    fs::create_dir_all(out.join("tasks"))?;

    let config = SyntheticConfig::default();
    let corpus = generate(&config)?;

    let mut f = fs::File::create(out.join("synthetic.jsonl"))?;
    for d in &corpus.documents {
        writeln!(
            f,
            "{}",
            serde_json::to_string(&json!({"id": d.id, "lang": d.lang, "text": d.text}))?
        )?;
    }
    fs::write(
        out.join("synthetic-config.json"),
        serde_json::to_string_pretty(&config)? + "\n",
    )?;

    let features = letter_profile_features(&corpus.documents);
    fs::write(
        out.join("features.json"),
        serde_json::to_string_pretty(&features)? + "\n",
    )?;

    for lang in ["l0", "l1", "l2", "l3"] {
        let task = cloze_task(&corpus, &LanguageTag::from(lang), 40, 6, 3, config.seed)?;
        fs::write(
            out.join(format!("tasks/cloze-{lang}.json")),
            serde_json::to_string_pretty(&task)? + "\n",
        )?;
    }

    let first_round = ["l0", "l1", "l2", "l3"];
    let base = |kind: &str, k: usize| {
        json!({
            "paths": {"corpus": "synthetic.jsonl", "features": "features.json"},
            "corpus": {"languages": first_round},
            "clustering": {"kind": kind, "k": k, "seed": 0},
            "budget": {"total_tokens": 2_048_000, "seed_tokens": 1_024_000},
            "training": {"batch_size": 4, "global_seed": 0},
            "eval": {
                "icl_tasks": ["tasks/cloze-l0.json", "tasks/cloze-l1.json", "tasks/cloze-l2.json", "tasks/cloze-l3.json"],
                "icl_shots": [0, 2],
                "icl_runs": 3
            },
            "hmr": {"targets": [{"languages": ["l4"]}], "total_tokens": 128_000}
        })
    };
    fs::write(
        out.join("run-typology.json"),
        serde_json::to_string_pretty(&base("typology", 2))? + "\n",
    )?;
    fs::write(
        out.join("run-tfidf.json"),
        serde_json::to_string_pretty(&base("tfidf", 4))? + "\n",
    )?;

    println!(
        "wrote {} documents and fixtures to {}",
        corpus.documents.len(),
        out.display()
    );
    Ok(())
}
