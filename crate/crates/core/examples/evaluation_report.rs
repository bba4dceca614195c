//! Compare seed, dense and typology experts in a perplexity table, measure
//! forgetting relative to the seed, and write the report files.
//!
//! `cargo run --release --example evaluation_report [-- OUT_DIR]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use xelm::allocation::{build_language_tree, cut_tree};
use xelm::btm::{
    branch, branch_dense, merge, plan_budget, pretrain_seed, train_round, RoundConfig,
    SeedCheckpoint,
};
use xelm::cli::render_table;
use xelm::corpus::{
    load_language_features, CorpusStore, IngestConfig, LanguageFeatures, LanguageTag,
};
use xelm::eval::{emit_report, forgetting, ppl_table, PplSources, Report, Setting};
use xelm::lm::{LmConfig, OptimizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let tmp = tempfile::tempdir()?;
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&out)?;
    let store = CorpusStore::ingest(&data.join("synthetic.jsonl"), &IngestConfig::default())?
        .make_split(0.1, 7)?
        .filter_languages(|l| l.as_str() != "l4");
    let features: LanguageFeatures = load_language_features(&data.join("features.json"))?
        .into_iter()
        .filter(|(l, _)| l.as_str() != "l4")
        .collect();

    let lm = LmConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 64,
        ..LmConfig::desk()
    };
    let round = |total: u64, k: usize, batch_size: usize| -> xelm::Result<RoundConfig> {
        Ok(RoundConfig {
            plan: plan_budget(total, k)?,
            seq_len: 64,
            batch_size,
            optimizer: OptimizerConfig {
                max_lr: 3e-3,
                ..OptimizerConfig::desk()
            },
            global_seed: 0,
            workers: 1,
            out_dir: out.clone(),
            log_every: 100,
        })
    };
    let seed_path = out.join("seed.ckpt");
    pretrain_seed(&store, &lm, &round(150 * 256, 1, 4)?, &seed_path)?;
    let seed = SeedCheckpoint::open("seed", &seed_path)?;

    // Dense and experts train on the same number of tokens.
    let budget = 200 * 256;
    let dense = train_round(
        &store,
        None,
        &[branch_dense(
            &seed,
            features.keys().cloned().collect(),
            &out,
        )?],
        &round(budget, 1, 4)?,
    )?;
    let dense = merge(&seed, dense)?;
    let model = cut_tree(&build_language_tree(&features)?, 2)?;
    let typology = merge(
        &seed,
        train_round(
            &store,
            None,
            &branch(&seed, 2, &model, &out)?,
            &round(budget, 2, 2)?,
        )?,
    )?;

    let valid_docs = store.valid_by_language();
    let valid: BTreeMap<LanguageTag, Vec<&str>> = valid_docs
        .iter()
        .map(|(l, d)| (l.clone(), d.iter().map(|d| d.text.as_str()).collect()))
        .collect();
    let sources = PplSources {
        seed: Some(&seed_path),
        dense: Some(&dense),
        typology: Some(&typology),
        ..PplSources::default()
    };
    let table = ppl_table(
        &sources,
        &valid,
        &[Setting::Seed, Setting::Dense, Setting::Typology],
    )?;
    print!("{}", render_table("validation perplexity", &table));

    let matrix = forgetting(&typology, &seed_path, &valid)?;
    println!("\nforgetting (expert ppl minus seed ppl):");
    for (e, row) in matrix.delta.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|d| format!("{d:+8.3}")).collect();
        println!("  {:<32} {}", matrix.experts[e], cells.join(" "));
    }

    let train_tokens: BTreeMap<LanguageTag, u64> = store
        .counts()
        .iter()
        .map(|(l, c)| (l.clone(), c.tokens))
        .collect();
    let report = Report {
        ppl: vec![table],
        forgetting: Some(matrix),
        seed_tokens: train_tokens.clone(),
        train_tokens,
        ..Report::default()
    };
    let files = emit_report(&report, &out.join("figures"))?;
    println!(
        "\nwrote {} report files under {}",
        files.len(),
        out.join("figures").display()
    );
    Ok(())
}
