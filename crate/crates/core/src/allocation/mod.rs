//! Corpus partitioning: balanced TF-IDF k-means over documents, or a
//! typological pairing tree over languages.

mod kmeans;
mod model;
mod tfidf;
mod typology;

pub use kmeans::{balanced_assign, balanced_kmeans, capacity, KMeansConfig, KMeansFit, Point};
pub use model::{
    allocate, cut_tree, fit_tfidf_clusters, squared_distance, Allocation, Assignment, ClusterKind,
    ClusterModel, TfidfClusterConfig,
};
pub use tfidf::{fit_tfidf, tokenize, SparseVector, TfIdfModel};
pub use typology::{build_language_tree, LanguageTree, Merge, TreeCluster, TreeLevel};
