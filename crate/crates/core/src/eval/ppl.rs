use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocation::ClusterModel;
use crate::btm::{ExpertManifest, ExpertScope, ExpertSet};
use crate::corpus::LanguageTag;
use crate::error::{Error, Result};
use crate::inference::{ensemble_perplexity, top1_select, RoutingConfig, TfidfRouter};
use crate::lm::{checkpoint, perplexity, LmParams};

/// Column of a perplexity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Seed,
    Dense,
    TfidfTop1,
    TfidfEnsemble,
    Typology,
    Hmr,
}

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting::Seed,
        Setting::Dense,
        Setting::TfidfTop1,
        Setting::TfidfEnsemble,
        Setting::Typology,
        Setting::Hmr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Seed => "seed",
            Setting::Dense => "dense",
            Setting::TfidfTop1 => "tfidf_top1",
            Setting::TfidfEnsemble => "tfidf_ensemble",
            Setting::Typology => "typology",
            Setting::Hmr => "hmr",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown setting `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplCell {
    pub language: LanguageTag,
    pub setting: Setting,
    pub perplexity: f64,
}

/// Per-language perplexity by setting. Cells are sorted by
/// (setting, language); a setting's average is the mean of its cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub cells: Vec<PplCell>,
    pub averages: BTreeMap<Setting, f64>,
    /// Number of experts in the set behind each setting.
    pub experts: BTreeMap<Setting, usize>,
    /// Routing used for the ensemble column, if present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingConfig>,
}

impl PplReport {
    pub fn from_cells(
        mut cells: Vec<PplCell>,
        experts: BTreeMap<Setting, usize>,
        routing: Option<RoutingConfig>,
    ) -> Self {
        cells.sort_by(|a, b| (a.setting, &a.language).cmp(&(b.setting, &b.language)));
        let mut sums: BTreeMap<Setting, (f64, usize)> = BTreeMap::new();
        for c in &cells {
            let s = sums.entry(c.setting).or_default();
            s.0 += c.perplexity;
            s.1 += 1;
        }
        let averages = sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect();
        Self {
            cells,
            averages,
            experts,
            routing,
        }
    }

    pub fn get(&self, language: &LanguageTag, setting: Setting) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.setting == setting && &c.language == language)
            .map(|c| c.perplexity)
    }

    pub fn settings(&self) -> Vec<Setting> {
        self.averages.keys().copied().collect()
    }

    pub fn languages(&self) -> Vec<LanguageTag> {
        let mut langs: Vec<LanguageTag> = self.cells.iter().map(|c| c.language.clone()).collect();
        langs.sort();
        langs.dedup();
        langs
    }
}

/// Checkpoints and expert sets behind each setting. A setting can only be
/// requested when its source is present.
#[derive(Debug, Clone, Default)]
pub struct PplSources<'a> {
    pub seed: Option<&'a Path>,
    /// A one-expert set.
    pub dense: Option<&'a ExpertSet>,
    pub typology: Option<&'a ExpertSet>,
    pub tfidf: Option<(&'a ExpertSet, &'a ClusterModel)>,
    /// A set extended by adaptation rounds.
    pub hmr: Option<&'a ExpertSet>,
    pub routing: RoutingConfig,
}

/// Newest adaptation-round expert covering `lang`, if any.
pub fn hmr_select<'a>(set: &'a ExpertSet, lang: &LanguageTag) -> Option<&'a ExpertManifest> {
    set.experts
        .iter()
        .filter(|e| e.cluster_model_id != set.cluster_model_id)
        .filter(|e| matches!(&e.scope, ExpertScope::Languages { languages } if languages.contains(lang)))
        .max_by_key(|e| e.round)
}

#[derive(Default)]
struct Cache(HashMap<PathBuf, LmParams<f32>>);

impl Cache {
    fn get(&mut self, path: &Path) -> Result<&LmParams<f32>> {
        if !self.0.contains_key(path) {
            let p = checkpoint::load(path)?;
            self.0.insert(path.to_path_buf(), p);
        }
        Ok(&self.0[path])
    }
}

fn missing(setting: Setting) -> Error {
    Error::InvalidArgument(format!(
        "setting `{setting}` requested but no source was given"
    ))
}

/// Perplexity of every requested setting on every language of `valid`.
/// Languages an HMR set does not cover are left out of the `hmr` column.
pub fn ppl_table(
    sources: &PplSources<'_>,
    valid: &BTreeMap<LanguageTag, Vec<&str>>,
    settings: &[Setting],
) -> Result<PplReport> {
    if let Some((lang, _)) = valid.iter().find(|(_, docs)| docs.is_empty()) {
        return Err(Error::EmptySelection(format!(
            "no validation documents for `{lang}`"
        )));
    }
    let mut cache = Cache::default();
    let mut cells = Vec::new();
    let mut experts = BTreeMap::new();
    let mut routing = None;
    for &setting in settings {
        match setting {
            Setting::Seed => {
                let path = sources.seed.ok_or_else(|| missing(setting))?;
                experts.insert(setting, 1);
                for (lang, docs) in valid {
                    let p = perplexity(cache.get(path)?, docs.iter().copied())?;
                    cells.push(cell(lang, setting, p));
                }
            }
            Setting::Dense => {
                let set = sources.dense.ok_or_else(|| missing(setting))?;
                if set.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "dense setting needs a one-expert set, got {} experts",
                        set.len()
                    )));
                }
                experts.insert(setting, 1);
                let path = set.experts[0].checkpoint.clone();
                for (lang, docs) in valid {
                    let p = perplexity(cache.get(&path)?, docs.iter().copied())?;
                    cells.push(cell(lang, setting, p));
                }
            }
            Setting::Typology | Setting::TfidfTop1 => {
                let set = if setting == Setting::Typology {
                    sources.typology
                } else {
                    sources.tfidf.map(|(s, _)| s)
                }
                .ok_or_else(|| missing(setting))?;
                experts.insert(setting, set.experts_of(&set.cluster_model_id).len());
                for (lang, docs) in valid {
                    let path = set.get(top1_select(set, lang)?)?.checkpoint.clone();
                    let p = perplexity(cache.get(&path)?, docs.iter().copied())?;
                    cells.push(cell(lang, setting, p));
                }
            }
            Setting::TfidfEnsemble => {
                let (set, model) = sources.tfidf.ok_or_else(|| missing(setting))?;
                let members = set.experts_of(&set.cluster_model_id);
                experts.insert(setting, members.len());
                for e in &members {
                    cache.get(&e.checkpoint)?;
                }
                let params: Vec<&LmParams<f32>> =
                    members.iter().map(|e| &cache.0[&e.checkpoint]).collect();
                let router = TfidfRouter::new(model, sources.routing)?;
                for (lang, docs) in valid {
                    let p = ensemble_perplexity(
                        &params,
                        &router,
                        docs.iter().copied(),
                        sources.routing.context_stride,
                    )?;
                    cells.push(cell(lang, setting, p));
                }
                routing = Some(sources.routing);
            }
            Setting::Hmr => {
                let set = sources.hmr.ok_or_else(|| missing(setting))?;
                let mut used = 0;
                for (lang, docs) in valid {
                    if let Some(e) = hmr_select(set, lang) {
                        used += 1;
                        let p = perplexity(cache.get(&e.checkpoint)?, docs.iter().copied())?;
                        cells.push(cell(lang, setting, p));
                    }
                }
                if used == 0 {
                    return Err(Error::EmptySelection(
                        "no adaptation-round expert covers any evaluated language".into(),
                    ));
                }
                experts.insert(
                    setting,
                    set.len() - set.experts_of(&set.cluster_model_id).len(),
                );
            }
        }
    }
    Ok(PplReport::from_cells(cells, experts, routing))
}

fn cell(language: &LanguageTag, setting: Setting, perplexity: f64) -> PplCell {
    PplCell {
        language: language.clone(),
        setting,
        perplexity,
    }
}
