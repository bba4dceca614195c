//! Serve TF-IDF cluster experts as a routed ensemble and compare the
//! full mixture with top-m sparse mixtures and a single expert.
//!
//! `cargo run --release --example routed_ensemble`

use std::path::PathBuf;

use xelm::allocation::{allocate, fit_tfidf_clusters, TfidfClusterConfig};
use xelm::btm::{branch, plan_budget, pretrain_seed, train_round, RoundConfig, SeedCheckpoint};
use xelm::corpus::{CorpusStore, IngestConfig};
use xelm::inference::{ensemble_perplexity, RoutingConfig, TfidfRouter};
use xelm::lm::{checkpoint, perplexity, LmConfig, LmParams, OptimizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let tmp = tempfile::tempdir()?;
    let out = tmp.path();
    let store = CorpusStore::ingest(&data.join("synthetic.jsonl"), &IngestConfig::default())?
        .make_split(0.05, 7)?
        .filter_languages(|l| l.as_str() != "l4");
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
    pretrain_seed(&store, &lm, &round(150 * 256, 1)?, &seed_path)?;
    let seed = SeedCheckpoint::open("seed", &seed_path)?;

    let k = 4;
    let model = fit_tfidf_clusters(&store, &TfidfClusterConfig::new(k, 0))?;
    let alloc = allocate(&store, &model)?;
    let experts = train_round(
        &store,
        Some(&alloc),
        &branch(&seed, k, &model, out)?,
        &round(k as u64 * 150 * 256, k)?,
    )?;
    let params: Vec<LmParams<f32>> = experts
        .iter()
        .map(|e| checkpoint::load(&e.checkpoint))
        .collect::<xelm::Result<_>>()?;
    let refs: Vec<&LmParams<f32>> = params.iter().collect();

    let docs: Vec<&str> = store.valid_documents().map(|d| d.text.as_str()).collect();
    let seed_params: LmParams<f32> = checkpoint::load(&seed_path)?;
    println!(
        "seed alone           {:.3}",
        perplexity(&seed_params, docs.iter().copied())?
    );
    println!(
        "expert 0 alone       {:.3}",
        perplexity(refs[0], docs.iter().copied())?
    );
    for (top_m, stride) in [(None, 1), (Some(2), 1), (Some(1), 1), (None, 16)] {
        let cfg = RoutingConfig {
            top_m,
            context_stride: stride,
            ..RoutingConfig::default()
        };
        let router = TfidfRouter::new(&model, cfg)?;
        let ppl = ensemble_perplexity(&refs, &router, docs.iter().copied(), stride)?;
        let m = top_m.map_or("all".to_string(), |m| m.to_string());
        println!("ensemble m={m:<3} s={stride:<2}  {ppl:.3}");
    }
    Ok(())
}
