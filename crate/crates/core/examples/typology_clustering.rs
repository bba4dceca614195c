//! Build the language hierarchy from feature vectors, cut it at each
//! achievable expert count, and pick donors for held-out languages.
//!
//! `cargo run --release --example typology_clustering`

use std::path::PathBuf;

use xelm::allocation::{build_language_tree, cut_tree};
use xelm::btm::select_donor;
use xelm::corpus::{load_language_features, LanguageFeatures, LanguageTag};

fn main() -> xelm::Result<()> {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data");
    let all = load_language_features(&data.join("features.json"))?;
    let held_out = LanguageTag::from("l4");
    let seen: LanguageFeatures = all
        .iter()
        .filter(|(l, _)| **l != held_out)
        .map(|(l, v)| (l.clone(), v.clone()))
        .collect();

    let tree = build_language_tree(&seen)?;
    for (depth, level) in tree.levels.iter().enumerate() {
        let groups: Vec<String> = level
            .clusters
            .iter()
            .map(|c| format!("{{{}}}", join(&c.members)))
            .collect();
        println!("level {depth}: {}", groups.join(" "));
    }
    for k in tree.achievable_k() {
        let model = cut_tree(&tree, k)?;
        let experts: Vec<String> = (0..k)
            .map(|e| join(&model.languages_of(e).into_iter().collect::<Vec<_>>()))
            .collect();
        println!("k={k} ({}): {}", model.id, experts.join(" | "));
    }

    let seen_tags: Vec<LanguageTag> = seen.keys().cloned().collect();
    println!(
        "donor for {held_out}: {}",
        select_donor(&held_out, &seen_tags, &all)?
    );
    Ok(())
}

fn join(tags: &[LanguageTag]) -> String {
    tags.iter()
        .map(LanguageTag::as_str)
        .collect::<Vec<_>>()
        .join(",")
}
