use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::LanguageTag;
use crate::error::{Error, Result};
use crate::lm::{checkpoint, TrainReport};

/// The data an expert is responsible for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertScope {
    /// Trains on every train document of these languages.
    Languages { languages: BTreeSet<LanguageTag> },
    /// Trains on its TF-IDF cluster; `share` is its fraction of each language.
    DataShare { share: BTreeMap<LanguageTag, f64> },
}

impl ExpertScope {
    pub fn covers(&self, lang: &LanguageTag) -> bool {
        match self {
            ExpertScope::Languages { languages } => languages.contains(lang),
            ExpertScope::DataShare { share } => share.get(lang).is_some_and(|&s| s > 0.0),
        }
    }
}

/// A trained checkpoint to branch from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCheckpoint {
    pub id: String,
    pub checkpoint: PathBuf,
    pub hash: String,
    pub round: usize,
}

impl SeedCheckpoint {
    /// Reference an existing checkpoint file as round-0 seed.
    pub fn open(id: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            checkpoint: path.to_path_buf(),
            hash: checkpoint::file_hash(path)?,
            round: 0,
        })
    }

    pub fn verify(&self) -> Result<()> {
        verify_hash(&self.checkpoint, &self.hash)
    }
}

/// Identity, parentage, data scope and training record of one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertManifest {
    pub expert_id: String,
    pub parent_id: String,
    pub cluster_model_id: String,
    pub cluster_index: usize,
    pub round: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub initial_checkpoint: PathBuf,
    pub initial_hash: String,
    pub tokens_trained: u64,
    pub scope: ExpertScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
}

impl ExpertManifest {
    pub fn verify(&self) -> Result<()> {
        verify_hash(&self.checkpoint, &self.checkpoint_hash)
    }
}

pub(crate) fn verify_hash(path: &Path, expected: &str) -> Result<()> {
    let found = checkpoint::file_hash(path)?;
    if found != expected {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
