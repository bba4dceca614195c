//! Independent reference computations shared by the oracle and acceptance tests.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xelm::allocation::{balanced_kmeans, build_language_tree, capacity, cut_tree, KMeansConfig};
use xelm::corpus::{LanguageFeatures, LanguageTag, TokenBatch};
use xelm::lm::{
    document_nll, forward, init_params, loss, loss_and_grads, perplexity, LmConfig, LmParams,
};

const BOS: u32 = 256;
const EOS: u32 = 257;

/// Parameters with every tensor perturbed so norms, biases and gains are generic.
pub fn generic_params(cfg: &LmConfig, seed: u64) -> LmParams<f64> {
    let mut p = init_params::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, t) in p.named_tensors_mut() {
        for x in &mut t.data {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn gradient_check_config() -> LmConfig {
    LmConfig {
        vocab_size: 259,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        dropout: 0.0,
    }
}

/// Worst relative error between analytic gradients and a fourth-order
/// central difference over every parameter, with its location.
pub fn worst_gradient_error() -> (f64, String) {
    let cfg = gradient_check_config();
    let params = generic_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, t) = (2, 8);
    let n = b * t;
    let mut mask = vec![true; n];
    mask[n - 1] = false;
    let batch = TokenBatch {
        batch_size: b,
        seq_len: t,
        tokens: (0..n).map(|_| rng.random_range(0..20)).collect(),
        targets: (0..n).map(|_| rng.random_range(0..20)).collect(),
        mask,
    };
    let (_, grads) = loss_and_grads(&params, &batch).unwrap();
    let h = 3e-3;
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = params.named_tensors()[ti].1.len();
        for i in 0..len {
            let at = |delta: f64| {
                let mut q = params.clone();
                q.named_tensors_mut()[ti].1.data[i] += delta;
                loss(&q, &batch).unwrap()
            };
            // The fourth-order stencil keeps truncation and rounding error far below 1e-5 relative.
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let analytic = grads.named_tensors()[ti].1.data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}"),
                );
            }
        }
    }
    worst
}

/// Summed NLL of every target of `BOS text EOS`, scoring consecutive chunks
/// of at most `max_seq_len` targets from scratch, with a hand-written log-softmax.
pub fn oracle_nll(params: &LmParams<f64>, text: &str) -> (f64, usize) {
    let mut ids = vec![BOS];
    ids.extend(text.bytes().map(u32::from));
    ids.push(EOS);
    let max_len = params.config.max_seq_len;
    let (mut total, mut count, mut start) = (0.0, 0, 0);
    while start + 1 < ids.len() {
        let end = (start + max_len).min(ids.len() - 1);
        let len = end - start;
        let batch = TokenBatch {
            batch_size: 1,
            seq_len: len,
            tokens: ids[start..end].to_vec(),
            targets: ids[start + 1..=end].to_vec(),
            mask: vec![true; len],
        };
        let logits = forward(params, &batch).unwrap();
        for t in 0..len {
            let row = logits.row(0, t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[ids[start + t + 1] as usize];
            count += 1;
        }
        start = end;
    }
    (total, count)
}

pub const PERPLEXITY_DOCS: [&str; 3] = [
    "abc",
    "hello world",
    "the quick brown fox jumps over the lazy dog, twice over",
];

pub fn perplexity_oracle_config() -> LmConfig {
    LmConfig {
        vocab_size: 259,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        dropout: 0.0,
    }
}

/// Largest relative disagreement between library and oracle, per document
/// and for the corpus perplexity. The third document spans several windows.
pub fn perplexity_oracle_error() -> f64 {
    let params = generic_params(&perplexity_oracle_config(), 3);
    let (mut total, mut count, mut worst) = (0.0, 0, 0.0f64);
    for d in PERPLEXITY_DOCS {
        let (t, c) = oracle_nll(&params, d);
        let lib = document_nll(&params, d).unwrap();
        assert_eq!(lib.count, c, "{d}");
        worst = worst.max((lib.total - t).abs() / t.abs());
        total += t;
        count += c;
    }
    let expected = (total / count as f64).exp();
    let got = perplexity(&params, PERPLEXITY_DOCS).unwrap();
    worst.max((got - expected).abs() / expected)
}

fn sse(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == c)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
            .collect();
        total += members
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&mean)
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
            })
            .sum::<f64>();
    }
    total
}

/// Minimum SSE over all 2-partitions whose parts are non-empty and hold at
/// most `ceil(n / 2)` points; point 0 is fixed in part 0.
pub fn best_balanced_bipartition(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = points.len();
    let cap = capacity(n, 2);
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << (n - 1)) {
        let assignment: Vec<usize> = (0..n)
            .map(|i| {
                if i == 0 {
                    0
                } else {
                    ((mask >> (i - 1)) & 1) as usize
                }
            })
            .collect();
        let ones = assignment.iter().filter(|&&a| a == 1).count();
        if ones == 0 || ones > cap || n - ones > cap {
            continue;
        }
        let cost = sse(points, &assignment, 2);
        if cost < best.0 {
            best = (cost, assignment);
        }
    }
    best
}

/// Relabel a 2-way assignment so point 0 is in part 0.
pub fn canonical(assignment: &[usize]) -> Vec<usize> {
    if assignment[0] == 0 {
        assignment.to_vec()
    } else {
        assignment.iter().map(|&a| 1 - a).collect()
    }
}

/// Balanced 2-means on random instances of 2..=8 points against exhaustive search.
pub fn check_kmeans_against_exhaustive(seeds: std::ops::Range<u64>) -> Result<(), String> {
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let fit = balanced_kmeans(&points, 2, &KMeansConfig::new(2, seed)).unwrap();
        let (best, best_assignment) = best_balanced_bipartition(&points);
        if fit.cluster_sizes().iter().any(|&s| s > capacity(n, 2)) {
            return Err(format!("seed {seed}: sizes {:?}", fit.cluster_sizes()));
        }
        if let Some(w) = fit.objective_trace.windows(2).find(|w| w[1] > w[0] + 1e-9) {
            return Err(format!("seed {seed}: objective rose {w:?}"));
        }
        if (fit.objective - best).abs() > 1e-9 * best.max(1.0) {
            return Err(format!("seed {seed}: {} vs optimum {best}", fit.objective));
        }
        if canonical(&fit.assignment) != best_assignment {
            return Err(format!("seed {seed}: assignment differs from the optimum"));
        }
    }
    Ok(())
}

fn tag(i: usize) -> LanguageTag {
    LanguageTag::new(format!("x{i}"))
}

/// All perfect matchings of `items` (even length).
fn matchings(items: &[usize]) -> Vec<Vec<(usize, usize)>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let first = items[0];
    let mut out = Vec::new();
    for j in 1..items.len() {
        let rest: Vec<usize> = items[1..]
            .iter()
            .copied()
            .filter(|&x| x != items[j])
            .collect();
        for mut m in matchings(&rest) {
            m.push((first, items[j]));
            out.push(m);
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Languages in pairs around well-separated centres, in random order.
pub fn separated_pairs(fixture: u64) -> LanguageFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + fixture);
    let n = 2 * rng.random_range(1..=4);
    let mut features: LanguageFeatures = BTreeMap::new();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for p in 0..n / 2 {
        let centre = [
            100.0 * p as f64,
            37.0 * (p % 3) as f64,
            rng.random_range(0.0..5.0),
        ];
        for &lang in &order[2 * p..2 * p + 2] {
            let v: Vec<f64> = centre
                .iter()
                .map(|c| c + rng.random_range(-1.0..1.0))
                .collect();
            features.insert(tag(lang), v);
        }
    }
    features
}

/// The first merge level against brute-force minimum-weight perfect
/// matching, and the singleton cut, on each fixture.
pub fn check_pairing_against_matching(fixtures: std::ops::Range<u64>) -> Result<(), String> {
    for fixture in fixtures {
        let features = separated_pairs(fixture);
        let n = features.len();
        let vecs: Vec<&Vec<f64>> = (0..n).map(|i| &features[&tag(i)]).collect();
        let weight =
            |m: &Vec<(usize, usize)>| m.iter().map(|&(i, j)| dist(vecs[i], vecs[j])).sum::<f64>();
        let best = matchings(&(0..n).collect::<Vec<_>>())
            .into_iter()
            .min_by(|a, b| weight(a).total_cmp(&weight(b)))
            .unwrap();
        let expected: BTreeSet<BTreeSet<LanguageTag>> =
            best.iter().map(|&(i, j)| [tag(i), tag(j)].into()).collect();

        let tree = build_language_tree(&features).unwrap();
        let level1: BTreeSet<BTreeSet<LanguageTag>> = tree.levels[1]
            .clusters
            .iter()
            .map(|c| c.members.iter().cloned().collect())
            .collect();
        if level1 != expected {
            return Err(format!(
                "fixture {fixture}: pairs {level1:?}, optimum {expected:?}"
            ));
        }
        let singletons = cut_tree(&tree, n).unwrap();
        if let Some(e) = (0..n).find(|&e| singletons.languages_of(e).len() != 1) {
            return Err(format!("fixture {fixture}: expert {e} is not monolingual"));
        }
    }
    Ok(())
}
