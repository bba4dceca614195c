//! One full round: pretrain a seed, branch one expert per typology
//! cluster, train the experts independently, merge them into a set.
//!
//! `cargo run --release --example branch_train_merge [-- OUT_DIR]`

use std::path::PathBuf;

use xelm::allocation::{build_language_tree, cut_tree};
use xelm::btm::{
    branch, merge, plan_budget, pretrain_seed, train_round, ExpertScope, RoundConfig,
    SeedCheckpoint,
};
use xelm::corpus::{load_language_features, CorpusStore, IngestConfig, LanguageFeatures};
use xelm::lm::{LmConfig, OptimizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            workers: 2,
            out_dir: out.clone(),
            log_every: 100,
        })
    };

    let seed_path = out.join("seed.ckpt");
    pretrain_seed(&store, &lm, &round(200 * 256, 1)?, &seed_path)?;
    let seed = SeedCheckpoint::open("seed", &seed_path)?;

    let model = cut_tree(&build_language_tree(&features)?, 2)?;
    let experts = branch(&seed, 2, &model, &out)?;
    let trained = train_round(&store, None, &experts, &round(2 * 200 * 256, 2)?)?;
    let set = merge(&seed, trained)?;
    set.save(&out.join("expert-set.json"))?;

    for e in &set.experts {
        let scope = match &e.scope {
            ExpertScope::Languages { languages } => languages
                .iter()
                .map(|l| l.as_str())
                .collect::<Vec<_>>()
                .join(","),
            ExpertScope::DataShare { .. } => "tfidf cluster".into(),
        };
        println!(
            "{} <- {}  [{scope}]  {} tokens  {}",
            e.expert_id,
            e.parent_id,
            e.tokens_trained,
            &e.checkpoint_hash[..12]
        );
    }
    println!(
        "expert set written to {}",
        out.join("expert-set.json").display()
    );
    Ok(())
}
