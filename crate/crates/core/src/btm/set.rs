use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{read_json, write_json, ExpertManifest, ExpertScope, SeedCheckpoint};
use crate::corpus::LanguageTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub parent: String,
    pub child: String,
    pub round: usize,
}

/// Merged experts plus the parent edges linking them back to the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSet {
    pub seed: SeedCheckpoint,
    /// Cluster model of the first round.
    pub cluster_model_id: String,
    pub experts: Vec<ExpertManifest>,
    pub lineage: Vec<LineageEdge>,
}

impl ExpertSet {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn get(&self, expert_id: &str) -> Result<&ExpertManifest> {
        self.experts
            .iter()
            .find(|e| e.expert_id == expert_id)
            .ok_or_else(|| Error::UnknownExpert(expert_id.to_string()))
    }

    /// Experts of one cluster model, ordered by cluster index.
    pub fn experts_of(&self, cluster_model_id: &str) -> Vec<&ExpertManifest> {
        let mut v: Vec<&ExpertManifest> = self
            .experts
            .iter()
            .filter(|e| e.cluster_model_id == cluster_model_id)
            .collect();
        v.sort_by_key(|e| e.cluster_index);
        v
    }

    /// `(expert_id, checkpoint_hash)` for every expert.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.experts
            .iter()
            .map(|e| (e.expert_id.clone(), e.checkpoint_hash.clone()))
            .collect()
    }

    /// Expert of the first-round cluster model that covers `lang`, choosing
    /// the highest data share for TF-IDF scopes (ties to the lowest index).
    pub fn covering_expert(&self, lang: &LanguageTag) -> Option<&ExpertManifest> {
        let mut best: Option<(&ExpertManifest, f64)> = None;
        for e in self.experts_of(&self.cluster_model_id) {
            let weight = match &e.scope {
                ExpertScope::Languages { languages } => {
                    if languages.contains(lang) {
                        1.0
                    } else {
                        continue;
                    }
                }
                ExpertScope::DataShare { share } => share.get(lang).copied().unwrap_or(0.0),
            };
            if weight > 0.0 && best.is_none_or(|(_, w)| weight > w) {
                best = Some((e, weight));
            }
        }
        best.map(|(e, _)| e)
    }

    /// Register further experts (e.g. from an adaptation round). Existing
    /// entries are never modified.
    pub fn extend(&mut self, experts: Vec<ExpertManifest>) -> Result<()> {
        let mut candidate = self.clone();
        for e in experts {
            candidate.lineage.push(LineageEdge {
                parent: e.parent_id.clone(),
                child: e.expert_id.clone(),
                round: e.round,
            });
            candidate.experts.push(e);
        }
        candidate.validate()?;
        *self = candidate;
        Ok(())
    }

    /// Unique ids, unique cluster slots, resolvable parents, matching hashes.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut slots = HashSet::new();
        for e in &self.experts {
            if !ids.insert(e.expert_id.as_str()) {
                return Err(Error::DuplicateExpert(e.expert_id.clone()));
            }
            if !slots.insert((e.cluster_model_id.as_str(), e.cluster_index)) {
                return Err(Error::DuplicateExpert(format!(
                    "{} (cluster {} of `{}` already owned)",
                    e.expert_id, e.cluster_index, e.cluster_model_id
                )));
            }
        }
        for e in &self.experts {
            if e.parent_id != self.seed.id && !ids.contains(e.parent_id.as_str()) {
                return Err(Error::UnknownExpert(e.parent_id.clone()));
            }
            e.verify()?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Collect trained experts into a set after verifying every checkpoint.
pub fn merge(seed: &SeedCheckpoint, experts: Vec<ExpertManifest>) -> Result<ExpertSet> {
    let cluster_model_id = experts
        .first()
        .map(|e| e.cluster_model_id.clone())
        .ok_or_else(|| Error::EmptySelection("no experts to merge".into()))?;
    let lineage = experts
        .iter()
        .map(|e| LineageEdge {
            parent: e.parent_id.clone(),
            child: e.expert_id.clone(),
            round: e.round,
        })
        .collect();
    let set = ExpertSet {
        seed: seed.clone(),
        cluster_model_id,
        experts,
        lineage,
    };
    set.validate()?;
    Ok(set)
}
