use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kmeans::{balanced_kmeans, KMeansConfig};
use super::tfidf::{fit_tfidf, SparseVector, TfIdfModel};
use super::typology::LanguageTree;
use crate::corpus::{CorpusStore, DocFilter, LanguageTag};
use crate::error::{Error, Result};
use crate::seeding::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Tfidf,
    Typology,
}

impl std::fmt::Display for ClusterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusterKind::Tfidf => "tfidf",
            ClusterKind::Typology => "typology",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", content = "map", rename_all = "lowercase")]
pub enum Assignment {
    /// Fitted document id to expert index.
    Documents(BTreeMap<String, usize>),
    /// Language to expert index.
    Languages(BTreeMap<LanguageTag, usize>),
}

/// A k-way partition of the corpus. Persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub id: String,
    pub kind: ClusterKind,
    pub k: usize,
    /// Row-major `[k, dim]`: TF-IDF space for `tfidf`, feature space for `typology`.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Assignment,
    /// Per language, the fraction of its documents held by each expert.
    pub data_share: BTreeMap<LanguageTag, Vec<f64>>,
    /// The vectorizer the centroids live in (`tfidf` models only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tfidf: Option<TfIdfModel>,
}

impl ClusterModel {
    fn with_id(mut self) -> Self {
        self.id = String::new();
        let digest = sha256_hex(&serde_json::to_vec(&self).expect("model serializes"));
        self.id = format!("{}-k{}-{}", self.kind, self.k, &digest[..8]);
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Expert covering `lang` under a language assignment.
    pub fn expert_for_language(&self, lang: &LanguageTag) -> Option<usize> {
        match &self.assignment {
            Assignment::Languages(map) => map.get(lang).copied(),
            Assignment::Documents(_) => None,
        }
    }

    /// Languages assigned to `expert` under a language assignment.
    pub fn languages_of(&self, expert: usize) -> BTreeSet<LanguageTag> {
        match &self.assignment {
            Assignment::Languages(map) => map
                .iter()
                .filter(|(_, &e)| e == expert)
                .map(|(l, _)| l.clone())
                .collect(),
            Assignment::Documents(_) => BTreeSet::new(),
        }
    }

    /// Index of the centroid nearest to a TF-IDF vector (ties to the lowest index).
    pub fn nearest_centroid(&self, v: &SparseVector) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (e, c) in self.centroids.iter().enumerate() {
            let d = squared_distance(v, c);
            if d < best.0 {
                best = (d, e);
            }
        }
        best.1
    }
}

/// `||v - c||^2` for a sparse `v` and dense `c`.
pub fn squared_distance(v: &SparseVector, c: &[f64]) -> f64 {
    let c_norm: f64 = c.iter().map(|x| x * x).sum();
    (v.squared_norm() - 2.0 * v.dot_dense(c) + c_norm).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfidfClusterConfig {
    pub k: usize,
    pub max_features: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub n_init: usize,
}

impl TfidfClusterConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_features: 4096,
            seed,
            max_iter: 100,
            n_init: 10,
        }
    }
}

fn shares_from_counts(
    counts: BTreeMap<LanguageTag, Vec<usize>>,
) -> BTreeMap<LanguageTag, Vec<f64>> {
    counts
        .into_iter()
        .map(|(lang, row)| {
            let total: usize = row.iter().sum();
            let share = row.iter().map(|&c| c as f64 / total as f64).collect();
            (lang, share)
        })
        .collect()
}

/// Fit TF-IDF on the train split and partition its documents with balanced k-means.
pub fn fit_tfidf_clusters(store: &CorpusStore, cfg: &TfidfClusterConfig) -> Result<ClusterModel> {
    let docs: Vec<_> = store.train_documents().collect();
    let tfidf = fit_tfidf(docs.iter().map(|d| d.text.as_str()), cfg.max_features)?;
    let vectors: Vec<SparseVector> = docs.iter().map(|d| tfidf.transform(&d.text)).collect();
    let fit = balanced_kmeans(
        &vectors,
        tfidf.dim(),
        &KMeansConfig {
            k: cfg.k,
            seed: cfg.seed,
            max_iter: cfg.max_iter,
            n_init: cfg.n_init,
        },
    )?;
    let mut counts: BTreeMap<LanguageTag, Vec<usize>> = BTreeMap::new();
    for (d, &e) in docs.iter().zip(&fit.assignment) {
        counts
            .entry(d.lang.clone())
            .or_insert_with(|| vec![0; cfg.k])[e] += 1;
    }
    let assignment = docs
        .iter()
        .zip(&fit.assignment)
        .map(|(d, &e)| (d.id.clone(), e))
        .collect();
    Ok(ClusterModel {
        id: String::new(),
        kind: ClusterKind::Tfidf,
        k: cfg.k,
        centroids: fit.centroids,
        assignment: Assignment::Documents(assignment),
        data_share: shares_from_counts(counts),
        tfidf: Some(tfidf),
    }
    .with_id())
}

/// Cut the language tree at the level with exactly `k` clusters.
pub fn cut_tree(tree: &LanguageTree, k: usize) -> Result<ClusterModel> {
    let level = tree.level_with_k(k).ok_or_else(|| Error::UnrealizableK {
        k,
        achievable: tree.achievable_k(),
    })?;
    let mut map = BTreeMap::new();
    let mut data_share = BTreeMap::new();
    for (e, cluster) in level.clusters.iter().enumerate() {
        for lang in &cluster.members {
            map.insert(lang.clone(), e);
            let mut row = vec![0.0; k];
            row[e] = 1.0;
            data_share.insert(lang.clone(), row);
        }
    }
    Ok(ClusterModel {
        id: String::new(),
        kind: ClusterKind::Typology,
        k,
        centroids: level.clusters.iter().map(|c| c.centroid.clone()).collect(),
        assignment: Assignment::Languages(map),
        data_share,
        tfidf: None,
    }
    .with_id())
}

/// Expert index for every document of a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub k: usize,
    /// Aligned with `store.documents()`.
    pub doc_to_expert: Vec<usize>,
    /// Per language, the fraction of its train documents held by each expert.
    pub data_share: BTreeMap<LanguageTag, Vec<f64>>,
    doc_ids: Vec<String>,
}

impl Allocation {
    /// Expert holding a document, by id.
    pub fn expert_of(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .map(|i| self.doc_to_expert[i])
    }

    /// Stream filter selecting the documents of one expert.
    pub fn filter_for(&self, expert: usize) -> DocFilter {
        DocFilter::Documents(self.document_ids(expert))
    }

    pub fn document_ids(&self, expert: usize) -> HashSet<String> {
        self.doc_ids
            .iter()
            .zip(&self.doc_to_expert)
            .filter(|(_, &e)| e == expert)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn expert_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &e in &self.doc_to_expert {
            sizes[e] += 1;
        }
        sizes
    }
}

/// Map every document to an expert. Documents not seen during a TF-IDF fit
/// go to their nearest centroid.
pub fn allocate(store: &CorpusStore, model: &ClusterModel) -> Result<Allocation> {
    let mut doc_to_expert = Vec::with_capacity(store.len());
    for doc in store.documents() {
        let e = match &model.assignment {
            Assignment::Languages(map) => *map
                .get(&doc.lang)
                .ok_or_else(|| Error::UncoveredLanguage(doc.lang.to_string()))?,
            Assignment::Documents(map) => match map.get(&doc.id) {
                Some(&e) => e,
                None => {
                    let tfidf = model.tfidf.as_ref().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "cluster model `{}` has no TF-IDF vectorizer",
                            model.id
                        ))
                    })?;
                    model.nearest_centroid(&tfidf.transform(&doc.text))
                }
            },
        };
        doc_to_expert.push(e);
    }
    let mut counts: BTreeMap<LanguageTag, Vec<usize>> = BTreeMap::new();
    for (i, (doc, &e)) in store.documents().iter().zip(&doc_to_expert).enumerate() {
        if store.split_of(i) == crate::corpus::Split::Train {
            counts
                .entry(doc.lang.clone())
                .or_insert_with(|| vec![0; model.k])[e] += 1;
        }
    }
    Ok(Allocation {
        k: model.k,
        doc_to_expert,
        data_share: shares_from_counts(counts),
        doc_ids: store.documents().iter().map(|d| d.id.clone()).collect(),
    })
}
