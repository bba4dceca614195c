use serde::{Deserialize, Serialize};

use crate::corpus::{check_feature_dims, LanguageFeatures, LanguageTag};
use crate::error::{Error, Result};

/// Languages grouped at one tree level, with the mean of their feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCluster {
    /// Sorted language codes.
    pub members: Vec<LanguageTag>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Indices into the previous level's clusters.
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeLevel {
    /// Ordered by smallest member code.
    pub clusters: Vec<TreeCluster>,
    /// Pairings performed to form this level, in merge order. Empty for the leaf level.
    pub merges: Vec<Merge>,
    /// Previous-level cluster carried over unmerged when the count was odd.
    pub passthrough: Option<usize>,
}

/// Balanced hierarchy over languages; level 0 holds the singleton leaves and
/// the last level a single cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageTree {
    pub leaves: Vec<LanguageTag>,
    pub levels: Vec<TreeLevel>,
}

impl LanguageTree {
    /// Cluster counts realized by some level, largest first.
    pub fn achievable_k(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.clusters.len()).collect()
    }

    pub fn level_with_k(&self, k: usize) -> Option<&TreeLevel> {
        self.levels.iter().find(|l| l.clusters.len() == k)
    }
}

fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(members: &[LanguageTag], features: &LanguageFeatures, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    for m in members {
        for (a, x) in c.iter_mut().zip(&features[m]) {
            *a += x;
        }
    }
    let inv = 1.0 / members.len() as f64;
    c.iter_mut().for_each(|x| *x *= inv);
    c
}

/// Greedily pair clusters by repeatedly merging the globally closest
/// unmatched pair (squared Euclidean distance between centroids), halving the
/// cluster count per level until one cluster remains. Distance ties go to the
/// pair whose member codes sort first.
pub fn build_language_tree(features: &LanguageFeatures) -> Result<LanguageTree> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a language tree needs at least 2 languages, got {}",
            features.len()
        )));
    }
    let dim = check_feature_dims(features)?;
    let leaves: Vec<LanguageTag> = features.keys().cloned().collect();
    let mut current: Vec<TreeCluster> = leaves
        .iter()
        .map(|l| TreeCluster {
            members: vec![l.clone()],
            centroid: features[l].clone(),
        })
        .collect();
    let mut levels = vec![TreeLevel {
        clusters: current.clone(),
        merges: Vec::new(),
        passthrough: None,
    }];

    while current.len() > 1 {
        let n = current.len();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                candidates.push((
                    squared_euclidean(&current[i].centroid, &current[j].centroid),
                    i,
                    j,
                ));
            }
        }
        // clusters are ordered by member codes, so index order is the lexicographic tie-break
        candidates
            .sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut matched = vec![false; n];
        let mut merges = Vec::new();
        for (distance, i, j) in candidates {
            if !matched[i] && !matched[j] {
                matched[i] = true;
                matched[j] = true;
                merges.push(Merge {
                    left: i,
                    right: j,
                    distance,
                });
            }
        }
        let passthrough = matched.iter().position(|m| !m);
        let mut next: Vec<TreeCluster> = merges
            .iter()
            .map(|m| {
                let mut members = [
                    current[m.left].members.clone(),
                    current[m.right].members.clone(),
                ]
                .concat();
                members.sort();
                let centroid = mean_of(&members, features, dim);
                TreeCluster { members, centroid }
            })
            .collect();
        if let Some(p) = passthrough {
            next.push(current[p].clone());
        }
        next.sort_by(|a, b| a.members.cmp(&b.members));
        levels.push(TreeLevel {
            clusters: next.clone(),
            merges,
            passthrough,
        });
        current = next;
    }
    Ok(LanguageTree { leaves, levels })
}
