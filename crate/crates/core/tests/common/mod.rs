#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeSet;
use std::path::Path;

use xelm::allocation::{build_language_tree, cut_tree, ClusterModel};
use xelm::btm::{plan_budget, pretrain_seed, RoundConfig, SeedCheckpoint};
use xelm::corpus::{CorpusStore, LanguageFeatures, LanguageTag};
use xelm::lm::{LmConfig, OptimizerConfig};
use xelm::synthetic::{generate, SyntheticConfig, SyntheticCorpus};

/// A model small enough to train in seconds.
pub fn tiny_lm() -> LmConfig {
    LmConfig {
        vocab_size: 259,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        dropout: 0.0,
    }
}

/// The default synthetic languages with fewer, shorter documents.
pub fn small_corpus_config() -> SyntheticConfig {
    SyntheticConfig {
        docs_per_language: 40,
        sentences_per_doc: (3, 5),
        ..SyntheticConfig::default()
    }
}

pub fn small_corpus() -> SyntheticCorpus {
    generate(&small_corpus_config()).unwrap()
}

pub fn seen_languages() -> BTreeSet<LanguageTag> {
    ["l0", "l1", "l2", "l3"]
        .into_iter()
        .map(LanguageTag::from)
        .collect()
}

/// Train/valid split of every language, and the first-round subset.
pub fn stores(corpus: &SyntheticCorpus) -> (CorpusStore, CorpusStore) {
    let full = CorpusStore::from_documents(corpus.documents.clone())
        .unwrap()
        .make_split(0.2, 7)
        .unwrap();
    let seen = seen_languages();
    let first = full.filter_languages(|l| seen.contains(l));
    (full, first)
}

pub fn round_config(
    dir: &Path,
    total_tokens: u64,
    k: usize,
    batch_size: usize,
    workers: usize,
) -> RoundConfig {
    RoundConfig {
        plan: plan_budget(total_tokens, k).unwrap(),
        seq_len: 32,
        batch_size,
        optimizer: OptimizerConfig {
            max_lr: 1e-2,
            ..OptimizerConfig::desk()
        },
        global_seed: 11,
        workers,
        out_dir: dir.to_path_buf(),
        log_every: 10,
    }
}

/// Typology clusters over the first-round languages.
pub fn typology_model(features: &LanguageFeatures, k: usize) -> ClusterModel {
    let seen = seen_languages();
    let f: LanguageFeatures = features
        .iter()
        .filter(|(l, _)| seen.contains(*l))
        .map(|(l, v)| (l.clone(), v.clone()))
        .collect();
    cut_tree(&build_language_tree(&f).unwrap(), k).unwrap()
}

/// Holds the temporary directory alive for the lifetime of the fixture.
pub struct Fixture {
    _dir: tempfile::TempDir,
    pub dir: std::path::PathBuf,
    pub corpus: xelm::synthetic::SyntheticCorpus,
    pub seed: SeedCheckpoint,
}

/// A briefly pretrained seed in a fresh directory.
pub fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let corpus = small_corpus();
    let (_, first) = stores(&corpus);
    let path = dir.join("seed.ckpt");
    pretrain_seed(
        &first,
        &tiny_lm(),
        &round_config(&dir, 64 * 64, 1, 2, 1),
        &path,
    )
    .unwrap();
    let seed = SeedCheckpoint::open("seed", &path).unwrap();
    Fixture {
        _dir: tmp,
        dir,
        corpus,
        seed,
    }
}
