use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tfidf::SparseVector;
use crate::error::{Error, Result};
use crate::seeding::derive_seed;

/// A point that can be measured against dense centroids.
pub trait Point {
    fn fits_dim(&self, dim: usize) -> bool;
    fn squared_norm(&self) -> f64;
    fn dot_dense(&self, dense: &[f64]) -> f64;
    fn add_into(&self, acc: &mut [f64]);
    fn dot_point(&self, other: &Self) -> f64;
}

impl Point for Vec<f64> {
    fn fits_dim(&self, dim: usize) -> bool {
        self.len() == dim
    }
    fn squared_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum()
    }
    fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.iter().zip(dense).map(|(a, b)| a * b).sum()
    }
    fn add_into(&self, acc: &mut [f64]) {
        for (a, x) in acc.iter_mut().zip(self) {
            *a += x;
        }
    }
    fn dot_point(&self, other: &Self) -> f64 {
        self.dot_dense(other)
    }
}

impl Point for SparseVector {
    fn fits_dim(&self, dim: usize) -> bool {
        self.0.iter().all(|&(i, _)| i < dim)
    }
    fn squared_norm(&self) -> f64 {
        SparseVector::squared_norm(self)
    }
    fn dot_dense(&self, dense: &[f64]) -> f64 {
        SparseVector::dot_dense(self, dense)
    }
    fn add_into(&self, acc: &mut [f64]) {
        for &(i, v) in &self.0 {
            acc[i] += v;
        }
    }
    fn dot_point(&self, other: &Self) -> f64 {
        let (mut a, mut b, mut sum) = (self.0.iter().peekable(), other.0.iter().peekable(), 0.0);
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    sum += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        sum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest final objective wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared point-to-centroid distances.
    pub objective: f64,
    /// Objective after each centroid update of the winning restart; non-increasing.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Per-cluster capacity `ceil(n / k)`.
pub fn capacity(n: usize, k: usize) -> usize {
    n.div_ceil(k)
}

fn squared_distance<P: Point>(p: &P, p_norm: f64, c: &[f64], c_norm: f64) -> f64 {
    (p_norm - 2.0 * p.dot_dense(c) + c_norm).max(0.0)
}

fn distance_table<P: Point>(points: &[P], norms: &[f64], centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c_norms: Vec<f64> = centroids
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum())
        .collect();
    points
        .iter()
        .zip(norms)
        .map(|(p, &pn)| {
            centroids
                .iter()
                .zip(&c_norms)
                .map(|(c, &cn)| squared_distance(p, pn, c, cn))
                .collect()
        })
        .collect()
}

/// Greedy capacity-constrained assignment: visit (point, centroid) pairs by
/// ascending distance and place each unassigned point at the first centroid
/// with room. Ties go to the lower point, then centroid, index.
pub fn balanced_assign(distances: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = distances.len();
    let cap = capacity(n, k);
    let mut pairs: Vec<(f64, usize, usize)> = distances
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(e, &d)| (d, i, e)))
        .collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assignment = vec![usize::MAX; n];
    let mut load = vec![0usize; k];
    let mut remaining = n;
    for (_, i, e) in pairs {
        if remaining == 0 {
            break;
        }
        if assignment[i] == usize::MAX && load[e] < cap {
            assignment[i] = e;
            load[e] += 1;
            remaining -= 1;
        }
    }
    assignment
}

fn objective(distances: &[Vec<f64>], assignment: &[usize]) -> f64 {
    distances
        .iter()
        .zip(assignment)
        .map(|(row, &e)| row[e])
        .sum()
}

fn update_centroids<P: Point>(
    points: &[P],
    assignment: &[usize],
    previous: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &e) in points.iter().zip(assignment) {
        p.add_into(&mut sums[e]);
        counts[e] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((mut s, c), prev)| {
            if c == 0 {
                return prev.clone();
            }
            let inv = 1.0 / c as f64;
            s.iter_mut().for_each(|x| *x *= inv);
            s
        })
        .collect()
}

fn kmeans_plus_plus<P: Point>(
    points: &[P],
    norms: &[f64],
    dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = points.len();
    let as_dense = |i: usize| {
        let mut v = vec![0.0; dim];
        points[i].add_into(&mut v);
        v
    };
    let mut chosen = vec![rng.random_range(0..n)];
    let mut centroids = vec![as_dense(chosen[0])];
    let mut nearest: Vec<f64> = distance_table(points, norms, &centroids)
        .into_iter()
        .map(|r| r[0])
        .collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        let c = as_dense(pick);
        let cn: f64 = c.iter().map(|x| x * x).sum();
        for ((d, p), &pn) in nearest.iter_mut().zip(points).zip(norms) {
            *d = d.min(squared_distance(p, pn, &c, cn));
        }
        centroids.push(c);
    }
    centroids
}

/// One balance-preserving local improvement: move a point into a cluster
/// with spare capacity, or swap two points between clusters, whichever is
/// found first that strictly lowers the objective.
fn improve_once<P: Point>(
    points: &[P],
    norms: &[f64],
    distances: &[Vec<f64>],
    assignment: &mut [usize],
    k: usize,
    cap: usize,
    tolerance: f64,
) -> bool {
    let n = points.len();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for i in 0..n {
        let a = assignment[i];
        if sizes[a] <= 1 {
            continue;
        }
        let (sa, da) = (sizes[a] as f64, distances[i][a]);
        for b in (0..k).filter(|&b| b != a && sizes[b] < cap) {
            let sb = sizes[b] as f64;
            let delta = sb / (sb + 1.0) * distances[i][b] - sa / (sa - 1.0) * da;
            if delta < -tolerance {
                assignment[i] = b;
                return true;
            }
        }
    }
    // Swapping x in A with y in B changes the objective by
    //   -(gain_x + gain_y) - |x - y|^2 (1/|A| + 1/|B|),
    // where gain is the fixed-centroid distance saved by each point moving.
    let max_norm_sq = norms.iter().copied().fold(0.0, f64::max);
    for a in 0..k {
        for b in a + 1..k {
            if sizes[a] == 0 || sizes[b] == 0 {
                continue;
            }
            let shrink = 1.0 / sizes[a] as f64 + 1.0 / sizes[b] as f64;
            let slack = 4.0 * max_norm_sq * shrink;
            let ranked = |from: usize, to: usize| {
                let mut v: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| assignment[i] == from)
                    .map(|i| (distances[i][from] - distances[i][to], i))
                    .collect();
                v.sort_unstable_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                v
            };
            let xs = ranked(a, b);
            let ys = ranked(b, a);
            for &(gx, x) in &xs {
                if gx + ys[0].0 + slack <= 0.0 {
                    break;
                }
                for &(gy, y) in &ys {
                    if gx + gy + slack <= 0.0 {
                        break;
                    }
                    let gap =
                        (norms[x] + norms[y] - 2.0 * points[x].dot_point(&points[y])).max(0.0);
                    if -(gx + gy) - gap * shrink < -tolerance {
                        assignment[x] = b;
                        assignment[y] = a;
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn single_run<P: Point>(
    points: &[P],
    norms: &[f64],
    dim: usize,
    cfg: &KMeansConfig,
    rng: &mut ChaCha8Rng,
) -> KMeansFit {
    let k = cfg.k;
    let cap = capacity(points.len(), k);
    let mut centroids = kmeans_plus_plus(points, norms, dim, k, rng);
    let mut assignment = balanced_assign(&distance_table(points, norms, &centroids), k);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut local_moves = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        centroids = update_centroids(points, &assignment, &centroids);
        let distances = distance_table(points, norms, &centroids);
        let current = objective(&distances, &assignment);
        trace.push(current);
        let proposal = balanced_assign(&distances, k);
        // Accept only strict improvements so the objective never rises.
        if proposal != assignment && objective(&distances, &proposal) < current {
            assignment = proposal;
            continue;
        }
        let tolerance = 1e-12 * (1.0 + current);
        if local_moves < 10 * points.len()
            && improve_once(
                points,
                norms,
                &distances,
                &mut assignment,
                k,
                cap,
                tolerance,
            )
        {
            local_moves += 1;
            continue;
        }
        converged = true;
        break;
    }
    if !converged {
        centroids = update_centroids(points, &assignment, &centroids);
        trace.push(objective(
            &distance_table(points, norms, &centroids),
            &assignment,
        ));
    }
    KMeansFit {
        objective: *trace.last().expect("at least one iteration"),
        centroids,
        assignment,
        objective_trace: trace,
        iterations,
        converged,
    }
}

/// Balanced k-means: every cluster holds at most `ceil(N / k)` points.
pub fn balanced_kmeans<P: Point>(
    points: &[P],
    dim: usize,
    cfg: &KMeansConfig,
) -> Result<KMeansFit> {
    let n = points.len();
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if cfg.k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the number of points {n}",
            cfg.k
        )));
    }
    if cfg.max_iter == 0 || cfg.n_init == 0 {
        return Err(Error::InvalidArgument(
            "max_iter and n_init must be positive".into(),
        ));
    }
    if let Some(i) = points.iter().position(|p| !p.fits_dim(dim)) {
        return Err(Error::DimensionMismatch(format!(
            "point {i} does not have dimension {dim}"
        )));
    }
    let norms: Vec<f64> = points.iter().map(Point::squared_norm).collect();
    let mut best: Option<KMeansFit> = None;
    for restart in 0..cfg.n_init {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("kmeans-restart-{restart}")));
        let fit = single_run(points, &norms, dim, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(raw: &[(f64, f64)]) -> Vec<Vec<f64>> {
        raw.iter().map(|&(x, y)| vec![x, y]).collect()
    }

    #[test]
    fn k_one_gives_global_mean() {
        let p = pts(&[(0.0, 0.0), (2.0, 0.0), (4.0, 6.0)]);
        let fit = balanced_kmeans(&p, 2, &KMeansConfig::new(1, 0)).unwrap();
        assert_eq!(fit.assignment, vec![0, 0, 0]);
        assert!((fit.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((fit.centroids[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_obvious_groups() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]);
        let fit = balanced_kmeans(&p, 2, &KMeansConfig::new(2, 3)).unwrap();
        assert_eq!(fit.assignment[0], fit.assignment[1]);
        assert_eq!(fit.assignment[2], fit.assignment[3]);
        assert_ne!(fit.assignment[0], fit.assignment[2]);
        assert!((fit.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let p = pts(&[(0.0, 0.0), (0.0, 1.0), (3.0, 0.0), (5.0, 1.0), (7.0, 7.0)]);
        let fit = balanced_kmeans(&p, 2, &KMeansConfig::new(5, 1)).unwrap();
        assert_eq!(fit.cluster_sizes(), vec![1; 5]);
        assert!(fit.objective.abs() < 1e-12);
    }

    #[test]
    fn invalid_k_rejected() {
        let p = pts(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(balanced_kmeans(&p, 2, &KMeansConfig::new(0, 0)).is_err());
        assert!(balanced_kmeans(&p, 2, &KMeansConfig::new(3, 0)).is_err());
    }

    #[test]
    fn balanced_assign_respects_capacity() {
        // all points nearest to centroid 0
        let d = vec![vec![0.0, 5.0], vec![0.1, 5.0], vec![0.2, 5.0]];
        let a = balanced_assign(&d, 2);
        assert_eq!(a, vec![0, 0, 1]);
    }

    proptest! {
        #[test]
        fn sizes_bounded_and_objective_non_increasing(
            raw in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let k = k.min(raw.len());
            let p = pts(&raw);
            let fit = balanced_kmeans(&p, 2, &KMeansConfig::new(k, seed)).unwrap();
            let sizes = fit.cluster_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), raw.len());
            prop_assert!(sizes.iter().all(|&s| s <= capacity(raw.len(), k)));
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
