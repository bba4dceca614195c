use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::allocation::ClusterKind;
use crate::corpus::LanguageTag;
use crate::error::{Error, Result};
use crate::eval::{IclConfig, Setting};
use crate::inference::RoutingConfig;
use crate::lm::{LmConfig, OptimizerConfig};

/// Everything a pipeline run needs, stored as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub clustering: ClusteringConfig,
    #[serde(default = "LmConfig::desk")]
    pub lm: LmConfig,
    pub budget: BudgetConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub hmr: Option<HmrConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// JSONL file or directory of JSONL files.
    pub corpus: PathBuf,
    /// Language feature fixture; required for typology clustering and HMR.
    #[serde(default)]
    pub features: Option<PathBuf>,
    /// Default workdir when neither `--workdir` nor `XBTM_WORKDIR` is set.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    /// Existing seed checkpoint; when absent one is pretrained.
    #[serde(default)]
    pub seed: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub valid_fraction: f64,
    pub split_seed: u64,
    pub allow_empty_text: bool,
    /// Languages of the first round; all ingested languages when absent.
    /// Others are only used by adaptation rounds.
    pub languages: Option<BTreeSet<LanguageTag>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            valid_fraction: 0.1,
            split_seed: 7,
            allow_empty_text: false,
            languages: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub kind: ClusterKind,
    pub k: usize,
    #[serde(default = "default_max_features")]
    pub max_features: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_features() -> usize {
    4096
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Tokens shared by all experts of the first round.
    pub total_tokens: u64,
    /// Seed pretraining tokens, used only when no seed checkpoint is given.
    #[serde(default)]
    pub seed_tokens: u64,
    /// Also train a single dense model on `total_tokens` as a baseline.
    #[serde(default = "yes")]
    pub dense_baseline: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub global_seed: u64,
    /// Concurrent training jobs; results do not depend on it.
    pub workers: usize,
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seq_len: 128,
            batch_size: 2,
            optimizer: OptimizerConfig::desk(),
            global_seed: 0,
            workers: 1,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Columns of `eval-ppl`; every available setting when empty.
    pub settings: Vec<Setting>,
    /// ICL task files (JSON).
    pub icl_tasks: Vec<PathBuf>,
    pub icl_shots: Vec<usize>,
    pub icl_runs: usize,
    pub icl_seed: u64,
    pub icl: IclConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: Vec::new(),
            icl_tasks: Vec::new(),
            icl_shots: vec![0],
            icl_runs: 5,
            icl_seed: 0,
            icl: IclConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmrTarget {
    pub languages: BTreeSet<LanguageTag>,
    /// Nearest first-round language by features when absent.
    #[serde(default)]
    pub donor: Option<LanguageTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmrConfig {
    pub targets: Vec<HmrTarget>,
    /// Tokens shared by all new experts of the round.
    pub total_tokens: u64,
    /// Also continue the dense baseline on all targets and donors.
    #[serde(default = "yes")]
    pub dense_baseline: bool,
}

impl RunConfig {
    /// Parse a config document, apply `key.path=value` overrides and
    /// resolve relative paths against `base`.
    pub fn from_value(mut value: Value, overrides: &[String], base: &Path) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: ".".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(value, overrides, &base)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        self.paths.features.iter_mut().for_each(fix);
        self.paths.workdir.iter_mut().for_each(fix);
        self.paths.seed.iter_mut().for_each(fix);
        self.eval.icl_tasks.iter_mut().for_each(fix);
    }

    fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.clustering.k == 0 {
            return bad("clustering.k", "must be at least 1".into());
        }
        if self.budget.total_tokens == 0 {
            return bad("budget.total_tokens", "must be positive".into());
        }
        if self.paths.seed.is_none() && self.budget.seed_tokens == 0 {
            return bad(
                "budget.seed_tokens",
                "must be positive when paths.seed is not set".into(),
            );
        }
        if !(self.corpus.valid_fraction > 0.0 && self.corpus.valid_fraction < 1.0) {
            return bad("corpus.valid_fraction", "must lie in (0, 1)".into());
        }
        if self.training.seq_len < 2 || self.training.seq_len > self.lm.max_seq_len {
            return bad(
                "training.seq_len",
                format!("must lie in [2, lm.max_seq_len = {}]", self.lm.max_seq_len),
            );
        }
        if self.training.batch_size == 0 {
            return bad("training.batch_size", "must be at least 1".into());
        }
        if self.routing.temperature <= 0.0 || self.routing.context_stride == 0 {
            return bad(
                "routing",
                "temperature must be positive and context_stride at least 1".into(),
            );
        }
        if self.clustering.kind == ClusterKind::Typology && self.paths.features.is_none() {
            return bad(
                "paths.features",
                "typology clustering needs a feature fixture".into(),
            );
        }
        self.lm.validate().or_else(|e| bad("lm", e.to_string()))
    }

    /// Fail unless every referenced input path exists.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![("paths.corpus", &self.paths.corpus)];
        paths.extend(self.paths.features.iter().map(|p| ("paths.features", p)));
        paths.extend(self.paths.seed.iter().map(|p| ("paths.seed", p)));
        paths.extend(self.eval.icl_tasks.iter().map(|p| ("eval.icl_tasks", p)));
        for (field, p) in paths {
            if !p.exists() {
                return Err(Error::Config {
                    path: field.into(),
                    message: format!("{} does not exist", p.display()),
                });
            }
        }
        Ok(())
    }
}

/// Set `a.b.c=value` in a JSON tree. The value is parsed as JSON and falls
/// back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        path: assignment.into(),
        message: "override must look like key.path=value".into(),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config {
                path: key.into(),
                message: "empty path segment".into(),
            });
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(Error::Config {
                    path: parts[..i].join("."),
                    message: "is not an object".into(),
                });
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "paths": {"corpus": "c.jsonl", "features": "f.json"},
            "clustering": {"kind": "typology", "k": 2},
            "budget": {"total_tokens": 1000, "seed_tokens": 500}
        })
    }

    #[test]
    fn defaults_and_relative_paths() {
        let cfg = RunConfig::from_value(minimal(), &[], Path::new("/data")).unwrap();
        assert_eq!(cfg.paths.corpus, PathBuf::from("/data/c.jsonl"));
        assert_eq!(cfg.lm, LmConfig::desk());
        assert_eq!(cfg.training.workers, 1);
        assert!(cfg.budget.dense_baseline);
    }

    #[test]
    fn round_trips_losslessly() {
        let cfg = RunConfig::from_value(
            minimal(),
            &[
                "hmr.targets=[{\"languages\":[\"l4\"]}]".into(),
                "hmr.total_tokens=10".into(),
            ],
            Path::new("/d"),
        )
        .unwrap();
        let back = RunConfig::from_value(
            serde_json::from_str(&cfg.to_json()).unwrap(),
            &[],
            Path::new("/elsewhere"),
        )
        .unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_with_json_values() {
        let cfg = RunConfig::from_value(
            minimal(),
            &[
                "training.workers=4".into(),
                "clustering.kind=tfidf".into(),
                "routing.top_m=2".into(),
            ],
            Path::new("/"),
        )
        .unwrap();
        assert_eq!(cfg.training.workers, 4);
        assert_eq!(cfg.clustering.kind, ClusterKind::Tfidf);
        assert_eq!(cfg.routing.top_m, Some(2));
        let cfg = RunConfig::from_value(
            minimal(),
            &[
                "lm.n_layers=1".into(),
                "training.optimizer.max_lr=0.01".into(),
            ],
            Path::new("/"),
        )
        .unwrap();
        assert_eq!(cfg.lm.n_layers, 1);
        assert_eq!(cfg.lm.d_model, LmConfig::desk().d_model);
        assert_eq!(cfg.training.optimizer.max_lr, 0.01);
    }

    #[test]
    fn errors_name_the_field_path() {
        match RunConfig::from_value(
            minimal(),
            &["training.batch_size=\"many\"".into()],
            Path::new("/"),
        ) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "training.batch_size"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::from_value(minimal(), &["clustering.typo=1".into()], Path::new("/")) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "clustering.typo"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::from_value(minimal(), &["clustering.k=0".into()], Path::new("/")) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "clustering.k"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(apply_override(&mut minimal(), "novalue").is_err());
    }
}
