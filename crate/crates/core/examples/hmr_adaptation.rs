//! Add a new language to a trained expert set: branch a new expert from
//! the expert of its nearest seen language and train it on both, leaving
//! every existing expert untouched.
//!
//! `cargo run --release --example hmr_adaptation`

use std::path::PathBuf;

use xelm::allocation::{build_language_tree, cut_tree};
use xelm::btm::{
    branch, hmr_branch, merge, plan_budget, pretrain_seed, select_donor, train_round, HmrCluster,
    RoundConfig, SeedCheckpoint,
};
use xelm::corpus::{
    load_language_features, CorpusStore, IngestConfig, LanguageFeatures, LanguageTag,
};
use xelm::eval::hmr_select;
use xelm::lm::{checkpoint, perplexity, LmConfig, OptimizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let tmp = tempfile::tempdir()?;
    let out = tmp.path();
    let new_lang = LanguageTag::from("l4");
    let full = CorpusStore::ingest(&data.join("synthetic.jsonl"), &IngestConfig::default())?
        .make_split(0.1, 7)?;
    let first_round = full.filter_languages(|l| *l != new_lang);
    let features = load_language_features(&data.join("features.json"))?;
    let seen: LanguageFeatures = features
        .iter()
        .filter(|(l, _)| **l != new_lang)
        .map(|(l, v)| (l.clone(), v.clone()))
        .collect();

    let lm = LmConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 64,
        ..LmConfig::desk()
    };
    let round = |total: u64, k: usize| -> xelm::Result<RoundConfig> {
        Ok(RoundConfig {
            plan: plan_budget(total, k)?,
            seq_len: 64,
            batch_size: 4,
            optimizer: OptimizerConfig {
                max_lr: 3e-3,
                ..OptimizerConfig::desk()
            },
            global_seed: 0,
            workers: 1,
            out_dir: out.to_path_buf(),
            log_every: 100,
        })
    };
    let seed_path = out.join("seed.ckpt");
    pretrain_seed(&first_round, &lm, &round(150 * 256, 1)?, &seed_path)?;
    let seed = SeedCheckpoint::open("seed", &seed_path)?;
    let model = cut_tree(&build_language_tree(&seen)?, 2)?;
    let set = merge(
        &seed,
        train_round(
            &first_round,
            None,
            &branch(&seed, 2, &model, out)?,
            &round(2 * 150 * 256, 2)?,
        )?,
    )?;
    let before = set.hashes();

    let donor = select_donor(
        &new_lang,
        &seen.keys().cloned().collect::<Vec<_>>(),
        &features,
    )?;
    println!(
        "{new_lang} is closest to {donor}; branching from {}",
        set.covering_expert(&donor).expect("covered").expert_id
    );
    let cluster = HmrCluster {
        targets: [new_lang.clone()].into(),
        donor,
    };
    let new = train_round(
        &full,
        None,
        &hmr_branch(&set, &[cluster], out)?,
        &round(100 * 256, 1)?,
    )?;
    let mut adapted = set.clone();
    adapted.extend(new)?;
    assert!(set
        .experts
        .iter()
        .all(|e| adapted.hashes()[&e.expert_id] == before[&e.expert_id]));

    let docs: Vec<&str> = full.valid_by_language()[&new_lang]
        .iter()
        .map(|d| d.text.as_str())
        .collect();
    let score = |path: &std::path::Path| -> xelm::Result<f64> {
        perplexity(&checkpoint::load::<f32>(path)?, docs.iter().copied())
    };
    println!("{new_lang} perplexity: seed {:.3}", score(&seed_path)?);
    for e in &set.experts {
        println!("  {} {:.3}", e.expert_id, score(&e.checkpoint)?);
    }
    let hmr = hmr_select(&adapted, &new_lang).expect("new expert covers the language");
    println!("  {} {:.3} (new)", hmr.expert_id, score(&hmr.checkpoint)?);
    Ok(())
}
