use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::{ExpertManifest, ExpertScope, SeedCheckpoint};
use super::set::ExpertSet;
use crate::allocation::{Assignment, ClusterModel};
use crate::corpus::{LanguageFeatures, LanguageTag};
use crate::error::{Error, Result};

/// Pick an expert id based on `base` whose checkpoint files do not exist yet.
fn fresh_id(base: &str, dir: &Path, taken: &BTreeSet<String>) -> String {
    let free = |id: &str| {
        !taken.contains(id)
            && !dir.join(format!("{id}.init.ckpt")).exists()
            && !dir.join(format!("{id}.ckpt")).exists()
    };
    if free(base) {
        return base.to_string();
    }
    (1..)
        .map(|n| format!("{base}-b{n}"))
        .find(|id| free(id))
        .expect("unbounded search")
}

fn copy_checkpoint(from: &Path, to: &Path) -> Result<()> {
    if let Some(dir) = to.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::copy(from, to).map_err(|e| Error::io(to, e))?;
    Ok(())
}

fn new_manifest(
    id: String,
    parent: &SeedCheckpoint,
    model_id: &str,
    index: usize,
    scope: ExpertScope,
    dir: &Path,
) -> Result<ExpertManifest> {
    let init: PathBuf = dir.join(format!("{id}.init.ckpt"));
    copy_checkpoint(&parent.checkpoint, &init)?;
    Ok(ExpertManifest {
        expert_id: id,
        parent_id: parent.id.clone(),
        cluster_model_id: model_id.to_string(),
        cluster_index: index,
        round: parent.round + 1,
        checkpoint: init.clone(),
        checkpoint_hash: parent.hash.clone(),
        initial_checkpoint: init,
        initial_hash: parent.hash.clone(),
        tokens_trained: 0,
        scope,
        report: None,
    })
}

/// Branch `k` experts from the seed: each starts as a byte-identical copy
/// of the seed checkpoint, written to `dir/<expert_id>.init.ckpt`.
pub fn branch(
    seed: &SeedCheckpoint,
    k: usize,
    model: &ClusterModel,
    dir: &Path,
) -> Result<Vec<ExpertManifest>> {
    if model.k != k {
        return Err(Error::DimensionMismatch(format!(
            "asked for {k} experts but cluster model `{}` has k = {}",
            model.id, model.k
        )));
    }
    seed.verify()?;
    let mut taken = BTreeSet::new();
    (0..k)
        .map(|e| {
            let scope = match &model.assignment {
                Assignment::Languages(_) => ExpertScope::Languages {
                    languages: model.languages_of(e),
                },
                Assignment::Documents(_) => ExpertScope::DataShare {
                    share: model
                        .data_share
                        .iter()
                        .map(|(l, row)| (l.clone(), row[e]))
                        .collect(),
                },
            };
            let id = fresh_id(
                &format!("{}-r{}-e{e}", model.id, seed.round + 1),
                dir,
                &taken,
            );
            taken.insert(id.clone());
            new_manifest(id, seed, &model.id, e, scope, dir)
        })
        .collect()
}

/// Branch a single expert covering every language: the dense baseline.
pub fn branch_dense(
    seed: &SeedCheckpoint,
    languages: BTreeSet<LanguageTag>,
    dir: &Path,
) -> Result<ExpertManifest> {
    seed.verify()?;
    let id = fresh_id(&format!("dense-r{}", seed.round + 1), dir, &BTreeSet::new());
    new_manifest(
        id,
        seed,
        "dense",
        0,
        ExpertScope::Languages { languages },
        dir,
    )
}

fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest seen language in feature space; ties go to the lexicographically
/// smallest code.
pub fn select_donor(
    new_lang: &LanguageTag,
    seen: &[LanguageTag],
    features: &LanguageFeatures,
) -> Result<LanguageTag> {
    let target = features
        .get(new_lang)
        .ok_or_else(|| Error::MissingFeature(new_lang.to_string()))?;
    let mut candidates: Vec<&LanguageTag> = seen.iter().collect();
    candidates.sort();
    candidates.dedup();
    let mut best: Option<(f64, &LanguageTag)> = None;
    for lang in candidates {
        let v = features
            .get(lang)
            .ok_or_else(|| Error::MissingFeature(lang.to_string()))?;
        if v.len() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "feature vectors of `{new_lang}` and `{lang}` differ in length"
            )));
        }
        let d = squared_euclidean(target, v);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, lang));
        }
    }
    best.map(|(_, l)| l.clone())
        .ok_or_else(|| Error::InvalidArgument("no seen languages to choose a donor from".into()))
}

/// New languages to add in an adaptation round, seeded from their donor's expert.
/// Branch one expert from a trained one, e.g. to continue a dense model on
/// new languages. The parent's files are left untouched.
pub fn branch_from(
    parent: &ExpertManifest,
    base_id: &str,
    cluster_model_id: &str,
    scope: ExpertScope,
    dir: &Path,
) -> Result<ExpertManifest> {
    parent.verify()?;
    let parent_ref = SeedCheckpoint {
        id: parent.expert_id.clone(),
        checkpoint: parent.checkpoint.clone(),
        hash: parent.checkpoint_hash.clone(),
        round: parent.round,
    };
    let id = fresh_id(base_id, dir, &BTreeSet::new());
    new_manifest(id, &parent_ref, cluster_model_id, 0, scope, dir)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HmrCluster {
    pub targets: BTreeSet<LanguageTag>,
    pub donor: LanguageTag,
}

/// Branch one new expert per cluster from the expert covering its donor.
/// The new expert trains on donor and target languages; existing experts and
/// their files are left untouched.
pub fn hmr_branch(
    set: &ExpertSet,
    clusters: &[HmrCluster],
    dir: &Path,
) -> Result<Vec<ExpertManifest>> {
    let mut taken: BTreeSet<String> = set.experts.iter().map(|e| e.expert_id.clone()).collect();
    clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let parent = set
                .covering_expert(&c.donor)
                .ok_or_else(|| Error::UncoveredLanguage(c.donor.to_string()))?;
            parent.verify()?;
            let parent_ref = SeedCheckpoint {
                id: parent.expert_id.clone(),
                checkpoint: parent.checkpoint.clone(),
                hash: parent.checkpoint_hash.clone(),
                round: parent.round,
            };
            let names: Vec<&str> = c.targets.iter().map(|l| l.as_str()).collect();
            let id = fresh_id(
                &format!("hmr-r{}-{}", parent.round + 1, names.join("+")),
                dir,
                &taken,
            );
            taken.insert(id.clone());
            let mut languages = c.targets.clone();
            languages.insert(c.donor.clone());
            let model_id = format!("hmr-{}", set.cluster_model_id);
            new_manifest(
                id,
                &parent_ref,
                &model_id,
                i,
                ExpertScope::Languages { languages },
                dir,
            )
        })
        .collect()
}
