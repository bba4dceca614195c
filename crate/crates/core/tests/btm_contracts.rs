//! Branch, train, merge and adaptation contracts on tiny trained experts.

mod common;

use std::collections::BTreeSet;
use std::fs;

use common::{fixture, round_config, seen_languages, stores, typology_model};
use xelm::btm::{
    branch, branch_dense, hmr_branch, merge, plan_budget, select_donor, train_round, ComputeLayout,
    ExpertSet, HmrCluster,
};
use xelm::corpus::LanguageTag;
use xelm::error::Error;
use xelm::lm::{checkpoint, perplexity, LmParams};
use xelm::synthetic::letter_profile_features;

#[test]
fn branching_copies_the_seed_and_gives_fresh_ids() {
    let f = fixture();
    let model = typology_model(&letter_profile_features(&f.corpus.documents), 2);
    let a = branch(&f.seed, 2, &model, &f.dir).unwrap();
    let b = branch(&f.seed, 2, &model, &f.dir).unwrap();
    for e in a.iter().chain(&b) {
        assert_eq!(checkpoint::file_hash(&e.checkpoint).unwrap(), f.seed.hash);
        assert_eq!(e.initial_hash, f.seed.hash);
        assert_eq!(e.parent_id, "seed");
    }
    let ids: BTreeSet<&str> = a.iter().chain(&b).map(|e| e.expert_id.as_str()).collect();
    assert_eq!(ids.len(), 4);

    let dense = branch_dense(&f.seed, seen_languages(), &f.dir).unwrap();
    assert_eq!(dense.initial_hash, f.seed.hash);
}

#[test]
fn worker_count_does_not_change_checkpoints() {
    let f = fixture();
    let (_, first) = stores(&f.corpus);
    let model = typology_model(&letter_profile_features(&f.corpus.documents), 4);
    let run = |workers: usize| {
        let dir = f.dir.join(format!("w{workers}"));
        let experts = branch(&f.seed, 4, &model, &dir).unwrap();
        train_round(
            &first,
            None,
            &experts,
            &round_config(&dir, 4 * 20 * 64, 4, 2, workers),
        )
        .unwrap()
    };
    let one = run(1);
    let four = run(4);
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(a.expert_id, b.expert_id);
        assert_eq!(a.checkpoint_hash, b.checkpoint_hash, "{}", a.expert_id);
        assert_eq!(
            fs::read(&a.checkpoint).unwrap(),
            fs::read(&b.checkpoint).unwrap()
        );
    }
}

#[test]
fn tokens_trained_match_the_plan_in_every_round() {
    let f = fixture();
    let (full, first) = stores(&f.corpus);
    let features = letter_profile_features(&f.corpus.documents);
    let model = typology_model(&features, 2);
    let cfg = round_config(&f.dir, 2 * 30 * 64, 2, 2, 1);
    let trained = train_round(
        &first,
        None,
        &branch(&f.seed, 2, &model, &f.dir).unwrap(),
        &cfg,
    )
    .unwrap();
    assert_eq!(
        trained.iter().map(|e| e.tokens_trained).sum::<u64>(),
        cfg.plan.total_tokens
    );
    assert!(trained
        .iter()
        .all(|e| e.tokens_trained == cfg.plan.per_expert_tokens));

    let set = merge(&f.seed, trained).unwrap();
    let l4 = LanguageTag::from("l4");
    let donor = select_donor(
        &l4,
        &seen_languages().into_iter().collect::<Vec<_>>(),
        &features,
    )
    .unwrap();
    let hmr = hmr_branch(
        &set,
        &[HmrCluster {
            targets: [l4].into(),
            donor,
        }],
        &f.dir,
    )
    .unwrap();
    let cfg2 = round_config(&f.dir, 10 * 64, 1, 2, 1);
    let hmr = train_round(&full, None, &hmr, &cfg2).unwrap();
    assert_eq!(hmr[0].tokens_trained, cfg2.plan.total_tokens);
}

#[test]
fn budget_arithmetic() {
    let plan = plan_budget(10_500_000_000, 8).unwrap();
    assert_eq!(plan.per_expert_tokens, 1_312_500_000);
    assert_eq!(plan.shortfall, 0);
    // 4 devices, 20,000 updates, 8 accumulation steps, batch 2, 2048 tokens, model-parallel 2.
    let layout = ComputeLayout {
        experts: 1,
        gpus_per_expert: 4,
        updates: 20_000,
        grad_accumulation: 8,
        batch_size: 2,
        seq_len: 2048,
        model_parallel: 2,
    };
    assert_eq!(layout.total_tokens(), 1_310_720_000);
    assert_eq!(layout.tokens_per_expert(), 1_310_720_000);
    assert_eq!(plan_budget(777, 1).unwrap().per_expert_tokens, 777);
    let odd = plan_budget(10, 3).unwrap();
    assert_eq!((odd.per_expert_tokens, odd.shortfall), (3, 1));
}

#[test]
fn merge_checks_ids_and_hashes() {
    let f = fixture();
    let model = typology_model(&letter_profile_features(&f.corpus.documents), 2);
    let experts = branch(&f.seed, 2, &model, &f.dir).unwrap();
    assert_eq!(merge(&f.seed, experts.clone()).unwrap().len(), 2);

    let dup = vec![experts[0].clone(), experts[0].clone()];
    assert!(matches!(
        merge(&f.seed, dup),
        Err(Error::DuplicateExpert(_))
    ));

    fs::write(&experts[1].checkpoint, b"tampered").unwrap();
    match merge(&f.seed, experts.clone()) {
        Err(e @ Error::HashMismatch { .. }) => {
            assert!(e.to_string().contains(&experts[1].expert_id))
        }
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}

#[test]
fn specialization_and_adaptation_leave_existing_experts_untouched() {
    let f = fixture();
    let (full, first) = stores(&f.corpus);
    let features = letter_profile_features(&f.corpus.documents);
    let model = typology_model(&features, 2);
    let experts = branch(&f.seed, 2, &model, &f.dir).unwrap();
    let trained = train_round(
        &first,
        None,
        &experts,
        &round_config(&f.dir, 2 * 150 * 64, 2, 2, 1),
    )
    .unwrap();
    let set = merge(&f.seed, trained).unwrap();

    // Each expert is better on its own cluster's held-out data than on the other's.
    let valid = first.valid_by_language();
    let texts = |langs: &BTreeSet<LanguageTag>| -> Vec<&str> {
        langs
            .iter()
            .flat_map(|l| valid[l].iter().map(|d| d.text.as_str()))
            .collect()
    };
    let p0: LmParams<f32> = checkpoint::load(&set.experts[0].checkpoint).unwrap();
    let (a, b) = (model.languages_of(0), model.languages_of(1));
    assert!(perplexity(&p0, texts(&a)).unwrap() < perplexity(&p0, texts(&b)).unwrap());

    let before = set.hashes();
    let l4 = LanguageTag::from("l4");
    let donor = select_donor(
        &l4,
        &seen_languages().into_iter().collect::<Vec<_>>(),
        &features,
    )
    .unwrap();
    assert_eq!(donor.as_str(), "l0");
    let new = hmr_branch(
        &set,
        &[HmrCluster {
            targets: [l4].into(),
            donor: donor.clone(),
        }],
        &f.dir,
    )
    .unwrap();
    let donor_expert = set.covering_expert(&donor).unwrap();
    assert_eq!(new[0].initial_hash, donor_expert.checkpoint_hash);
    assert_eq!(new[0].parent_id, donor_expert.expert_id);
    let new = train_round(&full, None, &new, &round_config(&f.dir, 20 * 64, 1, 2, 1)).unwrap();

    let mut extended: ExpertSet = set.clone();
    extended.extend(new).unwrap();
    for e in &set.experts {
        assert_eq!(
            checkpoint::file_hash(&e.checkpoint).unwrap(),
            before[&e.expert_id]
        );
        assert_eq!(extended.hashes()[&e.expert_id], before[&e.expert_id]);
    }
    assert_eq!(extended.len(), 3);
}
