use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::btm::ExpertSet;
use crate::corpus::LanguageTag;
use crate::error::{Error, Result};
use crate::lm::{checkpoint, perplexity, LmParams};

/// `delta[e][l] = ppl(expert e, l) - ppl(seed, l)`; positive means the
/// expert forgot `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub experts: Vec<String>,
    pub languages: Vec<LanguageTag>,
    /// Languages each expert was trained on, for masking home cells.
    pub home: Vec<Vec<LanguageTag>>,
    pub seed_perplexity: Vec<f64>,
    pub delta: Vec<Vec<f64>>,
    pub forgot: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    pub cells: usize,
    pub forgot: usize,
    pub fraction_forgot: f64,
    /// `None` when nothing was forgotten.
    pub mean_delta_when_forgot: Option<f64>,
}

impl ForgettingMatrix {
    /// Build from raw perplexities; `expert_ppl[e][l]` aligns with `languages`.
    pub fn from_perplexities(
        experts: Vec<String>,
        languages: Vec<LanguageTag>,
        home: Vec<Vec<LanguageTag>>,
        seed_perplexity: Vec<f64>,
        expert_ppl: &[Vec<f64>],
    ) -> Result<Self> {
        if expert_ppl.len() != experts.len()
            || home.len() != experts.len()
            || seed_perplexity.len() != languages.len()
            || expert_ppl.iter().any(|row| row.len() != languages.len())
        {
            return Err(Error::DimensionMismatch(
                "forgetting matrix rows and columns disagree".into(),
            ));
        }
        let delta: Vec<Vec<f64>> = expert_ppl
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&seed_perplexity)
                    .map(|(p, s)| p - s)
                    .collect()
            })
            .collect();
        let forgot = delta
            .iter()
            .map(|row| row.iter().map(|&d| d > 0.0).collect())
            .collect();
        Ok(Self {
            experts,
            languages,
            home,
            seed_perplexity,
            delta,
            forgot,
        })
    }

    pub fn summary(&self) -> ForgettingSummary {
        let all: Vec<f64> = self.delta.iter().flatten().copied().collect();
        let forgotten: Vec<f64> = all.iter().copied().filter(|&d| d > 0.0).collect();
        ForgettingSummary {
            cells: all.len(),
            forgot: forgotten.len(),
            fraction_forgot: if all.is_empty() {
                0.0
            } else {
                forgotten.len() as f64 / all.len() as f64
            },
            mean_delta_when_forgot: if forgotten.is_empty() {
                None
            } else {
                Some(forgotten.iter().sum::<f64>() / forgotten.len() as f64)
            },
        }
    }

    pub fn is_home(&self, expert: usize, language: usize) -> bool {
        self.home[expert].contains(&self.languages[language])
    }
}

/// Score every expert of `set` and the seed on every language of `valid`.
pub fn forgetting(
    set: &ExpertSet,
    seed: &Path,
    valid: &BTreeMap<LanguageTag, Vec<&str>>,
) -> Result<ForgettingMatrix> {
    let rows: Vec<(String, &Path, Vec<LanguageTag>)> = set
        .experts
        .iter()
        .map(|e| {
            let home = valid
                .keys()
                .filter(|l| e.scope.covers(l))
                .cloned()
                .collect();
            (e.expert_id.clone(), e.checkpoint.as_path(), home)
        })
        .collect();
    forgetting_from_checkpoints(&rows, seed, valid)
}

/// As [`forgetting`] for arbitrary `(id, checkpoint, home languages)` rows.
pub fn forgetting_from_checkpoints(
    rows: &[(String, &Path, Vec<LanguageTag>)],
    seed: &Path,
    valid: &BTreeMap<LanguageTag, Vec<&str>>,
) -> Result<ForgettingMatrix> {
    if let Some((lang, _)) = valid.iter().find(|(_, docs)| docs.is_empty()) {
        return Err(Error::EmptySelection(format!(
            "no validation documents for `{lang}`"
        )));
    }
    let score = |p: &LmParams<f32>| -> Result<Vec<f64>> {
        valid
            .values()
            .map(|docs| perplexity(p, docs.iter().copied()))
            .collect()
    };
    let seed_ppl = score(&checkpoint::load(seed)?)?;
    let mut expert_ppl = Vec::with_capacity(rows.len());
    for (_, path, _) in rows {
        expert_ppl.push(score(&checkpoint::load(path)?)?);
    }
    ForgettingMatrix::from_perplexities(
        rows.iter().map(|(id, _, _)| id.clone()).collect(),
        valid.keys().cloned().collect(),
        rows.iter().map(|(_, _, home)| home.clone()).collect(),
        seed_ppl,
        &expert_ppl,
    )
}
