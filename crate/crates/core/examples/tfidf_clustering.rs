//! Cluster documents by TF-IDF with balanced k-means and show how each
//! language's documents spread over the experts.
//!
//! `cargo run --release --example tfidf_clustering [-- K]`

use std::path::PathBuf;

use xelm::allocation::{allocate, fit_tfidf_clusters, TfidfClusterConfig};
use xelm::corpus::{CorpusStore, IngestConfig};
use xelm::inference::{route_weights, RoutingConfig};

fn main() -> xelm::Result<()> {
    let k: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("K is an integer"))
        .unwrap_or(4);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic.jsonl");
    let store = CorpusStore::ingest(&path, &IngestConfig::default())?
        .make_split(0.1, 7)?
        .filter_languages(|l| l.as_str() != "l4");

    let model = fit_tfidf_clusters(&store, &TfidfClusterConfig::new(k, 0))?;
    let alloc = allocate(&store, &model)?;
    println!(
        "{} with {} vocabulary terms; expert sizes {:?}",
        model.id,
        model.tfidf.as_ref().map_or(0, |t| t.dim()),
        alloc.expert_sizes()
    );
    for (lang, share) in &model.data_share {
        let cells: Vec<String> = share.iter().map(|s| format!("{s:.2}")).collect();
        println!("  {lang}: {}", cells.join(" "));
    }

    // Routing weights sharpen as more of a held-out document is read.
    let doc = store
        .valid_documents()
        .next()
        .expect("validation documents");
    let home = alloc.expert_of(&doc.id).expect("allocated");
    println!("\nrouting `{}` (expert {home} holds its cluster):", doc.id);
    for end in [0, 8, 32, 128, doc.text.len()] {
        let end = end.min(doc.text.len());
        let w = route_weights(&doc.text[..end], &model, &RoutingConfig::default())?;
        let cells: Vec<String> = w.0.iter().map(|a| format!("{a:.3}")).collect();
        println!("  after {end:>4} bytes: {}", cells.join(" "));
    }
    Ok(())
}
