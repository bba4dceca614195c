//! Routing weights and ensemble scoring against hand computations.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xelm::allocation::{allocate, fit_tfidf_clusters, TfidfClusterConfig};
use xelm::corpus::{CorpusStore, LanguageTag, TokenBatch, TokenizerSpec};
use xelm::inference::{
    ensemble_next, ensemble_perplexity, ensemble_token_log_probs, route_weights, sparsify,
    weights_from_squared_distances, FixedRouter, RoutingConfig, RoutingWeights,
};
use xelm::lm::{forward, init_params, perplexity, LmConfig, LmParams};
use xelm::synthetic::{generate, SyntheticConfig};

fn model(seed: u64) -> LmParams<f64> {
    let cfg = LmConfig {
        vocab_size: 259,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        dropout: 0.0,
    };
    let mut p = init_params::<f64>(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.named_tensors_mut() {
        for x in &mut t.data {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn softmax_rows(params: &LmParams<f64>, ids: &[u32]) -> Vec<Vec<f64>> {
    let len = ids.len() - 1;
    let batch = TokenBatch {
        batch_size: 1,
        seq_len: len,
        tokens: ids[..len].to_vec(),
        targets: ids[1..].to_vec(),
        mask: vec![true; len],
    };
    let logits = forward(params, &batch).unwrap();
    (0..len)
        .map(|t| {
            let row = logits.row(0, t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.iter().map(|v| (v - max).exp() / z).collect()
        })
        .collect()
}

#[test]
fn two_expert_mixture_matches_hand_computation() {
    let (a, b) = (model(1), model(2));
    let ids = TokenizerSpec::default().encode("xyz", true);
    assert_eq!(ids.len(), 5);
    let (pa, pb) = (softmax_rows(&a, &ids), softmax_rows(&b, &ids));
    let router = FixedRouter(RoutingWeights(vec![0.3, 0.7]));
    let got = ensemble_token_log_probs(&[&a, &b], &router, &ids, 1).unwrap();
    assert_eq!(got.len(), 4);
    for t in 0..4 {
        let target = ids[t + 1] as usize;
        let expected = (0.3 * pa[t][target] + 0.7 * pb[t][target]).ln();
        assert!(
            (got[t] - expected).abs() <= 1e-12,
            "position {t}: {} vs {expected}",
            got[t]
        );
    }
}

#[test]
fn identical_experts_reproduce_the_single_expert_perplexity() {
    let p = model(5);
    let docs = [
        "one document",
        "and a second, longer document that spans windows",
    ];
    let single = perplexity(&p, docs).unwrap();
    for k in 1..=4 {
        let experts: Vec<&LmParams<f64>> = vec![&p; k];
        let alpha: Vec<f64> = (1..=k).map(|i| i as f64).collect();
        let total: f64 = alpha.iter().sum();
        let router = FixedRouter(RoutingWeights(alpha.iter().map(|a| a / total).collect()));
        let ens = ensemble_perplexity(&experts, &router, docs, 1).unwrap();
        assert!(
            (ens - single).abs() <= 1e-9 * single,
            "k={k}: {ens} vs {single}"
        );
    }
}

#[test]
fn routing_weight_reference_values() {
    let alpha = weights_from_squared_distances(&[0.0, 1.0], 0.1);
    assert!((alpha.0[0] - 0.9999546).abs() < 1e-6, "{:?}", alpha.0);
    assert!((alpha.0[1] - 4.54e-5).abs() < 1e-6, "{:?}", alpha.0);

    for k in 1..=6 {
        let alpha = weights_from_squared_distances(&vec![2.5; k], 0.3);
        assert!(alpha.0.iter().all(|&a| (a - 1.0 / k as f64).abs() < 1e-12));
    }

    let s = sparsify(&RoutingWeights(vec![0.5, 0.3, 0.2]), 2).unwrap();
    assert_eq!(s.0, vec![0.625, 0.375, 0.0]);

    let d = [0.3, 1.2, 0.7, 2.0];
    let entropies: Vec<f64> = (1..=10)
        .map(|i| weights_from_squared_distances(&d, 0.05 * i as f64).entropy())
        .collect();
    for w in entropies.windows(2) {
        assert!(w[1] >= w[0], "{entropies:?}");
    }
}

#[test]
fn ties_resolve_to_the_lowest_index() {
    let tied = RoutingWeights(vec![0.25, 0.25, 0.25, 0.25]);
    assert_eq!(tied.argmax(), 0);
    assert_eq!(sparsify(&tied, 1).unwrap().0, vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(sparsify(&tied, 2).unwrap().0, vec![0.5, 0.5, 0.0, 0.0]);
    let partial = RoutingWeights(vec![0.2, 0.4, 0.4]);
    assert_eq!(partial.argmax(), 1);
    assert_eq!(sparsify(&partial, 1).unwrap().0, vec![0.0, 1.0, 0.0]);
    assert!(sparsify(&partial, 0).is_err());
    assert!(sparsify(&partial, 4).is_err());
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn weights_sum_to_one(d in prop::collection::vec(0.0f64..50.0, 1..9), t in 0.01f64..10.0) {
        let alpha = weights_from_squared_distances(&d, t);
        prop_assert!((alpha.0.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(alpha.0.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn sparsified_weights_sum_to_one(alpha in (1usize..8).prop_flat_map(simplex), m in 1usize..8) {
        let k = alpha.len();
        let m = m.min(k);
        let s = sparsify(&RoutingWeights(alpha.clone()), m).unwrap();
        prop_assert!((s.0.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(s.0.iter().filter(|&&a| a > 0.0).count() <= m);
    }

    #[test]
    fn mixture_is_a_convex_combination(
        (alpha, dists) in (1usize..5).prop_flat_map(|k| (simplex(k), prop::collection::vec(simplex(6), k)))
    ) {
        let mix = ensemble_next(&dists, &RoutingWeights(alpha.clone())).unwrap();
        prop_assert!((mix.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (v, m) in mix.iter().enumerate() {
            let direct: f64 = alpha.iter().zip(&dists).map(|(a, d)| a * d[v]).sum();
            prop_assert!((m - direct).abs() <= 1e-12);
            let lo = dists.iter().map(|d| d[v]).fold(f64::INFINITY, f64::min);
            let hi = dists.iter().map(|d| d[v]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
        }
    }
}

#[test]
fn routing_concentrates_on_the_home_cluster() {
    let corpus = generate(&SyntheticConfig::default()).unwrap();
    let seen: BTreeSet<LanguageTag> = common::seen_languages();
    let store = CorpusStore::from_documents(corpus.documents)
        .unwrap()
        .make_split(0.1, 7)
        .unwrap()
        .filter_languages(|l| seen.contains(l));
    let model = fit_tfidf_clusters(&store, &TfidfClusterConfig::new(4, 3)).unwrap();
    let alloc = allocate(&store, &model).unwrap();
    let cfg = RoutingConfig::default();
    let (mut sum, mut n) = (0.0, 0usize);
    for doc in store.valid_documents() {
        let home = alloc.expert_of(&doc.id).unwrap();
        for end in (0..=doc.text.len()).step_by(8) {
            sum += route_weights(&doc.text[..end], &model, &cfg).unwrap().0[home];
            n += 1;
        }
    }
    let mean = sum / n as f64;
    println!("mean home-cluster weight over prefixes: {mean:.4}");
    assert!(mean > 0.9, "{mean}");
}
