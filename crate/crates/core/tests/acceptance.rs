//! End-to-end acceptance run: exact property checks plus direction-only
//! comparisons on the synthetic corpus with the desk-scale model.
//!
//! Prints one `[PASS]` or `[FAIL]` line per criterion and fails if any
//! criterion fails. Expect roughly twenty minutes on one core.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::oracles::{
    check_kmeans_against_exhaustive, check_pairing_against_matching, perplexity_oracle_error,
    worst_gradient_error,
};
use xelm::allocation::{
    allocate, build_language_tree, cut_tree, fit_tfidf_clusters, TfidfClusterConfig,
};
use xelm::btm::{
    branch, branch_dense, branch_from, hmr_branch, merge, plan_budget, pretrain_seed, select_donor,
    train_round, ExpertManifest, ExpertScope, HmrCluster, RoundConfig, SeedCheckpoint,
};
use xelm::corpus::{CorpusStore, LanguageFeatures, LanguageTag};
use xelm::eval::{forgetting, forgetting_from_checkpoints, ForgettingMatrix};
use xelm::inference::{
    ensemble_perplexity, sparsify, top1_select, weights_from_squared_distances, RoutingConfig,
    RoutingWeights, TfidfRouter,
};
use xelm::lm::{checkpoint, init_params, perplexity, LmConfig, LmParams, OptimizerConfig};
use xelm::synthetic::{generate, letter_profile_features};

const SEEDS: [u64; 3] = [1, 2, 3];
/// Optimizer steps of the seed model, at 4 x 128 tokens per step.
const SEED_STEPS: u64 = 2000;
/// Additional steps of the dense model; the experts share the same tokens.
const ROUND_STEPS: u64 = 1000;
/// Steps of each adaptation run, at 2 x 128 tokens per step.
const ADAPT_STEPS: u64 = 500;
const SEQ_LEN: usize = 128;

type Check = Result<String, String>;

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Check {
    let t = Instant::now();
    let (worst, at) = worst_gradient_error();
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-5 && secs < 60.0,
        format!("worst relative error {worst:.2e} at {at}, {secs:.1}s"),
    )
}

fn perplexity_oracle() -> Check {
    let err = perplexity_oracle_error();
    ensure(err <= 1e-9, format!("relative error {err:.2e}"))
}

fn routing_math() -> Check {
    let mut problems = Vec::new();
    for (i, d) in [vec![0.0, 1.0, 3.0], vec![1e3, 0.0], vec![0.5; 7], vec![2.0]]
        .iter()
        .enumerate()
    {
        for t in [0.01, 0.1, 1.0, 10.0] {
            let s: f64 = weights_from_squared_distances(d, t).0.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                problems.push(format!("case {i} T={t}: sum {s}"));
            }
        }
    }
    if weights_from_squared_distances(&[0.4; 5], 0.1)
        .0
        .iter()
        .any(|&a| (a - 0.2).abs() > 1e-12)
    {
        problems.push("equidistant weights are not uniform".into());
    }
    let a = weights_from_squared_distances(&[0.0, 1.0], 0.1);
    if (a.0[0] - 0.9999546).abs() > 1e-6 || (a.0[1] - 4.54e-5).abs() > 1e-6 {
        problems.push(format!("(0, 1) at T=0.1 gave {:?}", a.0));
    }
    let s = sparsify(&RoutingWeights(vec![0.5, 0.3, 0.2]), 2).unwrap();
    if s.0 != [0.625, 0.375, 0.0] {
        problems.push(format!("sparsify gave {:?}", s.0));
    }
    let d = [0.3, 1.2, 0.7, 2.0];
    let h: Vec<f64> = (1..=10)
        .map(|i| weights_from_squared_distances(&d, 0.05 * i as f64).entropy())
        .collect();
    if h.windows(2).any(|w| w[1] < w[0]) {
        problems.push(format!("entropy not monotone in T: {h:?}"));
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            format!("alpha = ({:.7}, {:.3e})", a.0[0], a.0[1])
        } else {
            problems.join("; ")
        },
    )
}

fn kmeans() -> Check {
    check_kmeans_against_exhaustive(0..100)
        .map(|_| "100 instances agree with exhaustive search".into())
}

fn typology_tree() -> Check {
    check_pairing_against_matching(0..20)
        .map(|_| "20 fixtures agree with optimal matching; singleton cuts".into())
}

fn schedule_independence() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = generate(&common::small_corpus_config()).unwrap();
    let (_, first) = common::stores(&corpus);
    let seed_path = d.join("seed.ckpt");
    checkpoint::save(
        &init_params::<f32>(&LmConfig::desk(), 0).unwrap(),
        &seed_path,
    )
    .unwrap();
    let seed = SeedCheckpoint::open("seed", &seed_path).unwrap();
    let features = letter_profile_features(&corpus.documents);
    let model = cut_tree(&build_language_tree(&seen_features(&features)).unwrap(), 4).unwrap();
    let run = |workers: usize| -> Vec<ExpertManifest> {
        let out = d.join(format!("w{workers}"));
        let experts = branch(&seed, 4, &model, &out).unwrap();
        let cfg = RoundConfig {
            plan: plan_budget(4 * 8 * 2 * SEQ_LEN as u64, 4).unwrap(),
            seq_len: SEQ_LEN,
            batch_size: 2,
            optimizer: OptimizerConfig::desk(),
            global_seed: 5,
            workers,
            out_dir: out,
            log_every: 100,
        };
        train_round(&first, None, &experts, &cfg).unwrap()
    };
    let (one, four) = (run(1), run(4));
    let identical = one.iter().zip(&four).all(|(a, b)| {
        a.checkpoint_hash == b.checkpoint_hash
            && std::fs::read(&a.checkpoint).unwrap() == std::fs::read(&b.checkpoint).unwrap()
    });
    let moved = one.iter().all(|e| e.checkpoint_hash != seed.hash);
    ensure(
        identical && moved,
        format!("4 experts, identical {identical}, trained {moved}"),
    )
}

fn seen_languages() -> BTreeSet<LanguageTag> {
    common::seen_languages()
}

fn seen_features(features: &LanguageFeatures) -> LanguageFeatures {
    let seen = seen_languages();
    features
        .iter()
        .filter(|(l, _)| seen.contains(*l))
        .map(|(l, v)| (l.clone(), v.clone()))
        .collect()
}

/// Tokens requested and consumed by one training round.
struct RoundTokens {
    name: String,
    planned: u64,
    trained: u64,
    per_expert_ok: bool,
}

fn round_tokens(name: &str, cfg: &RoundConfig, trained: &[ExpertManifest]) -> RoundTokens {
    RoundTokens {
        name: name.into(),
        planned: cfg.plan.total_tokens - cfg.plan.shortfall,
        trained: trained.iter().map(|e| e.tokens_trained).sum(),
        per_expert_ok: trained
            .iter()
            .all(|e| e.tokens_trained == cfg.plan.per_expert_tokens),
    }
}

/// Measurements of one seeded desk-scale run.
struct DeskRun {
    seed: u64,
    /// `(language, dense, typology top-1)` validation perplexities.
    first_round: Vec<(LanguageTag, f64, f64)>,
    target: LanguageTag,
    donor: LanguageTag,
    hmr: f64,
    dense_lapt: f64,
    hashes_unchanged: bool,
    forgetting: ForgettingMatrix,
    seed_vs_seed: ForgettingMatrix,
    /// Ensemble perplexity by top-m, for the first seed only.
    sparse: Option<BTreeMap<usize, f64>>,
    rounds: Vec<RoundTokens>,
    seconds: f64,
}

fn desk_run(seed_value: u64, with_sparse: bool) -> DeskRun {
    let start = Instant::now();
    let corpus = generate(&Default::default()).unwrap();
    let full = CorpusStore::from_documents(corpus.documents.clone())
        .unwrap()
        .make_split(0.1, 7)
        .unwrap();
    let seen = seen_languages();
    let store = full.filter_languages(|l| seen.contains(l));
    let features = letter_profile_features(&corpus.documents);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rc = |tokens: u64, k: usize, batch_size: usize| RoundConfig {
        plan: plan_budget(tokens, k).unwrap(),
        seq_len: SEQ_LEN,
        batch_size,
        optimizer: OptimizerConfig::desk(),
        global_seed: seed_value,
        workers: 1,
        out_dir: d.to_path_buf(),
        log_every: 100,
    };
    let load = |p: &Path| -> LmParams<f32> { checkpoint::load(p).unwrap() };
    let mut rounds = Vec::new();

    let seed_path = d.join("seed.ckpt");
    pretrain_seed(
        &store,
        &LmConfig::desk(),
        &rc(SEED_STEPS * 4 * SEQ_LEN as u64, 1, 4),
        &seed_path,
    )
    .unwrap();
    let seed = SeedCheckpoint::open("seed", &seed_path).unwrap();

    // Dense and typology experts see the same number of additional tokens.
    let budget = ROUND_STEPS * 4 * SEQ_LEN as u64;
    let dense_cfg = rc(budget, 1, 4);
    let dense = train_round(
        &store,
        None,
        &[branch_dense(&seed, seen.clone(), d).unwrap()],
        &dense_cfg,
    )
    .unwrap()
    .remove(0);
    rounds.push(round_tokens(
        "dense",
        &dense_cfg,
        std::slice::from_ref(&dense),
    ));
    let typology = cut_tree(&build_language_tree(&seen_features(&features)).unwrap(), 2).unwrap();
    let typ_cfg = rc(budget, 2, 2);
    let experts = train_round(
        &store,
        None,
        &branch(&seed, 2, &typology, d).unwrap(),
        &typ_cfg,
    )
    .unwrap();
    rounds.push(round_tokens("typology", &typ_cfg, &experts));
    let set = merge(&seed, experts).unwrap();

    let valid_docs = store.valid_by_language();
    let valid: BTreeMap<LanguageTag, Vec<&str>> = valid_docs
        .iter()
        .map(|(l, docs)| (l.clone(), docs.iter().map(|d| d.text.as_str()).collect()))
        .collect();
    let dense_params = load(&dense.checkpoint);
    let first_round = valid
        .iter()
        .map(|(lang, docs)| {
            let pd = perplexity(&dense_params, docs.iter().copied()).unwrap();
            let expert = load(
                &set.get(top1_select(&set, lang).unwrap())
                    .unwrap()
                    .checkpoint,
            );
            (
                lang.clone(),
                pd,
                perplexity(&expert, docs.iter().copied()).unwrap(),
            )
        })
        .collect();
    let forgetting_matrix = forgetting(&set, &seed_path, &valid).unwrap();
    let seed_vs_seed = forgetting_from_checkpoints(
        &[("seed".into(), seed_path.as_path(), Vec::new())],
        &seed_path,
        &valid,
    )
    .unwrap();

    // Adaptation: the new language's expert starts from its donor's expert;
    // the baseline continues the dense model on target and donor.
    let target = LanguageTag::from("l4");
    let donor = select_donor(
        &target,
        &seen.iter().cloned().collect::<Vec<_>>(),
        &features,
    )
    .unwrap();
    let before = set.hashes();
    let adapt_tokens = ADAPT_STEPS * 2 * SEQ_LEN as u64;
    let hmr_cfg = rc(adapt_tokens, 1, 2);
    let cluster = HmrCluster {
        targets: [target.clone()].into(),
        donor: donor.clone(),
    };
    let new = train_round(
        &full,
        None,
        &hmr_branch(&set, &[cluster], d).unwrap(),
        &hmr_cfg,
    )
    .unwrap();
    rounds.push(round_tokens("adaptation", &hmr_cfg, &new));
    let lapt_scope = ExpertScope::Languages {
        languages: [target.clone(), donor.clone()].into(),
    };
    let lapt = branch_from(&dense, "dense-lapt", "dense-lapt", lapt_scope, d).unwrap();
    let lapt_cfg = rc(adapt_tokens, 1, 2);
    let lapt = train_round(&full, None, &[lapt], &lapt_cfg).unwrap();
    rounds.push(round_tokens("dense continuation", &lapt_cfg, &lapt));
    let mut extended = set.clone();
    extended.extend(new.clone()).unwrap();
    let hashes_unchanged = set.experts.iter().all(|e| {
        checkpoint::file_hash(&e.checkpoint).unwrap() == before[&e.expert_id]
            && extended.hashes()[&e.expert_id] == before[&e.expert_id]
    });
    let target_docs: Vec<&str> = full.valid_by_language()[&target]
        .iter()
        .map(|d| d.text.as_str())
        .collect();
    let hmr = perplexity(&load(&new[0].checkpoint), target_docs.iter().copied()).unwrap();
    let dense_lapt = perplexity(&load(&lapt[0].checkpoint), target_docs.iter().copied()).unwrap();

    let sparse = with_sparse.then(|| {
        let model = fit_tfidf_clusters(&store, &TfidfClusterConfig::new(4, seed_value)).unwrap();
        let alloc = allocate(&store, &model).unwrap();
        let cfg = rc(budget, 4, 1);
        let experts = train_round(
            &store,
            Some(&alloc),
            &branch(&seed, 4, &model, d).unwrap(),
            &cfg,
        )
        .unwrap();
        rounds.push(round_tokens("tf-idf", &cfg, &experts));
        let params: Vec<LmParams<f32>> = experts.iter().map(|e| load(&e.checkpoint)).collect();
        let refs: Vec<&LmParams<f32>> = params.iter().collect();
        let texts: Vec<&str> = store.valid_documents().map(|d| d.text.as_str()).collect();
        [1, 2, 4]
            .into_iter()
            .map(|m| {
                let router = TfidfRouter::new(
                    &model,
                    RoutingConfig {
                        top_m: Some(m),
                        ..Default::default()
                    },
                )
                .unwrap();
                (
                    m,
                    ensemble_perplexity(&refs, &router, texts.iter().copied(), 1).unwrap(),
                )
            })
            .collect()
    });

    DeskRun {
        seed: seed_value,
        first_round,
        target,
        donor,
        hmr,
        dense_lapt,
        hashes_unchanged,
        forgetting: forgetting_matrix,
        seed_vs_seed,
        sparse,
        rounds,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn specialization(runs: &[DeskRun]) -> Check {
    let mut lines = Vec::new();
    let mut all = true;
    for r in runs {
        let wins = r.first_round.iter().filter(|(_, d, t)| t < d).count();
        let n = r.first_round.len() as f64;
        let (dense, typ) = (
            r.first_round.iter().map(|x| x.1).sum::<f64>() / n,
            r.first_round.iter().map(|x| x.2).sum::<f64>() / n,
        );
        all &= wins >= 3 && typ < dense;
        lines.push(format!(
            "seed {}: {wins}/4 wins, avg {typ:.3} vs dense {dense:.3} ({:.0}s)",
            r.seed, r.seconds
        ));
    }
    ensure(all, lines.join("; "))
}

fn adaptation(runs: &[DeskRun]) -> Check {
    let all = runs
        .iter()
        .all(|r| r.hmr < r.dense_lapt && r.hashes_unchanged);
    let lines: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: {} via {} {:.3} vs dense {:.3}, hashes unchanged {}",
                r.seed, r.target, r.donor, r.hmr, r.dense_lapt, r.hashes_unchanged
            )
        })
        .collect();
    ensure(all, lines.join("; "))
}

fn sparse_ensemble(runs: &[DeskRun]) -> Check {
    let ppl = runs
        .iter()
        .find_map(|r| r.sparse.as_ref())
        .ok_or("no sparse-ensemble run")?;
    let rel = (ppl[&2] - ppl[&4]).abs() / ppl[&4];
    ensure(
        rel <= 0.05,
        format!(
            "m=1 {:.4}, m=2 {:.4}, m=4 {:.4}, relative gap {:.2}%",
            ppl[&1],
            ppl[&2],
            ppl[&4],
            100.0 * rel
        ),
    )
}

fn forgetting_signs(runs: &[DeskRun]) -> Check {
    let mut lines = Vec::new();
    let mut all = true;
    for r in runs {
        let m = &r.forgetting;
        for (e, row) in m.delta.iter().enumerate() {
            let worst = (0..m.languages.len())
                .filter(|&l| !m.is_home(e, l))
                .map(|l| row[l])
                .fold(f64::NEG_INFINITY, f64::max);
            all &= worst > 0.0;
            lines.push(format!(
                "seed {} {}: max off-home delta {worst:+.3}",
                r.seed, m.experts[e]
            ));
        }
        let zero = r.seed_vs_seed.delta.iter().flatten().all(|&d| d == 0.0);
        all &= zero;
        if !zero {
            lines.push(format!("seed {}: seed-vs-seed deltas are not zero", r.seed));
        }
    }
    ensure(all, lines.join("; "))
}

fn budget(runs: &[DeskRun]) -> Check {
    let plan = plan_budget(10_500_000_000, 8).unwrap();
    let mut ok = plan.per_expert_tokens == 1_312_500_000 && plan.shortfall == 0;
    let mut rounds = 0;
    let mut bad = Vec::new();
    for r in runs {
        for t in &r.rounds {
            rounds += 1;
            if t.planned != t.trained || !t.per_expert_ok {
                ok = false;
                bad.push(format!(
                    "seed {} {}: planned {} trained {}",
                    r.seed, t.name, t.planned, t.trained
                ));
            }
        }
    }
    let detail = format!(
        "{} per expert; {rounds} rounds checked",
        plan.per_expert_tokens
    );
    ensure(
        ok,
        if bad.is_empty() {
            detail
        } else {
            format!("{detail}; {}", bad.join("; "))
        },
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, Check)> = vec![
        (1, guarded(gradients)),
        (2, guarded(perplexity_oracle)),
        (3, guarded(routing_math)),
        (4, guarded(kmeans)),
        (5, guarded(typology_tree)),
    ];
    let desk: Result<Vec<DeskRun>, String> =
        catch_unwind(|| SEEDS.iter().map(|&s| desk_run(s, s == SEEDS[0])).collect())
            .map_err(|_| "desk-scale run panicked".to_string());
    let from_runs = |f: fn(&[DeskRun]) -> Check| match &desk {
        Ok(runs) => guarded(|| f(runs)),
        Err(e) => Err(e.clone()),
    };
    results.push((6, from_runs(specialization)));
    results.push((7, from_runs(adaptation)));
    results.push((8, from_runs(sparse_ensemble)));
    results.push((9, guarded(schedule_independence)));
    results.push((10, from_runs(forgetting_signs)));
    results.push((11, from_runs(budget)));

    for (n, r) in &results {
        match r {
            Ok(detail) => println!("[PASS] criterion {n}: {detail}"),
            Err(detail) => println!("[FAIL] criterion {n}: {detail}"),
        }
    }
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
