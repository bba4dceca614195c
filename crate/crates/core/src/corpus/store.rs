use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;

/// ISO-639-1-style language code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Self {
        Self(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LanguageTag {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub lang: LanguageTag,
    pub text: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        lang: impl Into<LanguageTag>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            lang: lang.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub documents: usize,
    /// Byte-level tokens, excluding special tokens.
    pub tokens: u64,
    pub train_documents: usize,
    pub valid_documents: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Accept records whose text is empty.
    #[serde(default)]
    pub allow_empty_text: bool,
}

/// Language-tagged documents plus a train/valid partition.
///
/// Immutable once built; every accessor iterates in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStore {
    documents: Vec<Document>,
    split: Vec<Split>,
    counts: BTreeMap<LanguageTag, LanguageCounts>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    lang: Option<String>,
    text: Option<String>,
}

impl CorpusStore {
    /// Build a store from documents, all in the train split.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &documents {
            if doc.lang.as_str().is_empty() {
                return Err(Error::MissingField {
                    record: doc.id.clone(),
                    field: "lang",
                });
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateDocument(doc.id.clone()));
            }
        }
        let split = vec![Split::Train; documents.len()];
        Ok(Self::with_split(documents, split))
    }

    fn with_split(documents: Vec<Document>, split: Vec<Split>) -> Self {
        let mut counts: BTreeMap<LanguageTag, LanguageCounts> = BTreeMap::new();
        for (doc, s) in documents.iter().zip(&split) {
            let c = counts.entry(doc.lang.clone()).or_default();
            c.documents += 1;
            c.tokens += doc.text.len() as u64;
            match s {
                Split::Train => c.train_documents += 1,
                Split::Valid => c.valid_documents += 1,
            }
        }
        Self {
            documents,
            split,
            counts,
        }
    }

    /// Read a JSONL file, or every `*.jsonl` file in a directory (sorted by name).
    pub fn ingest(path: &Path, config: &IngestConfig) -> Result<Self> {
        let files = if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
                .collect();
            files.sort();
            files
        } else {
            vec![path.to_path_buf()]
        };

        let mut documents = Vec::new();
        for file in &files {
            read_jsonl(file, config, &mut documents)?;
        }
        if documents.is_empty() {
            warn!("{}: no documents ingested", path.display());
        }
        Self::from_documents(documents)
    }

    /// Assign a per-language validation set of `max(1, round(fraction * n))`
    /// documents (capped at `n - 1`), chosen by a seeded shuffle.
    pub fn make_split(&self, valid_fraction: f64, seed: u64) -> Result<Self> {
        if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "valid_fraction must lie in (0, 1), got {valid_fraction}"
            )));
        }
        let mut by_lang: BTreeMap<&LanguageTag, Vec<usize>> = BTreeMap::new();
        for (i, doc) in self.documents.iter().enumerate() {
            by_lang.entry(&doc.lang).or_default().push(i);
        }
        let mut split = vec![Split::Train; self.documents.len()];
        for (lang, mut indices) in by_lang {
            let n = indices.len();
            if n < 2 {
                return Err(Error::TooFewDocuments {
                    lang: lang.to_string(),
                    count: n,
                });
            }
            let n_valid = ((valid_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, lang.as_str()));
            indices.shuffle(&mut rng);
            for &i in &indices[..n_valid] {
                split[i] = Split::Valid;
            }
        }
        Ok(Self::with_split(self.documents.clone(), split))
    }

    /// Restrict the store to documents of the given languages, keeping splits.
    pub fn filter_languages(&self, keep: impl Fn(&LanguageTag) -> bool) -> Self {
        let (documents, split) = self
            .documents
            .iter()
            .zip(&self.split)
            .filter(|(d, _)| keep(&d.lang))
            .map(|(d, s)| (d.clone(), *s))
            .unzip();
        Self::with_split(documents, split)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.split[index]
    }

    pub fn iter_split(&self, which: Split) -> impl Iterator<Item = &Document> + '_ {
        self.documents
            .iter()
            .zip(&self.split)
            .filter(move |(_, s)| **s == which)
            .map(|(d, _)| d)
    }

    pub fn train_documents(&self) -> impl Iterator<Item = &Document> + '_ {
        self.iter_split(Split::Train)
    }

    pub fn valid_documents(&self) -> impl Iterator<Item = &Document> + '_ {
        self.iter_split(Split::Valid)
    }

    /// Validation documents grouped by language.
    pub fn valid_by_language(&self) -> BTreeMap<LanguageTag, Vec<&Document>> {
        let mut out: BTreeMap<LanguageTag, Vec<&Document>> = BTreeMap::new();
        for doc in self.valid_documents() {
            out.entry(doc.lang.clone()).or_default().push(doc);
        }
        out
    }

    pub fn counts(&self) -> &BTreeMap<LanguageTag, LanguageCounts> {
        &self.counts
    }

    pub fn languages(&self) -> Vec<LanguageTag> {
        self.counts.keys().cloned().collect()
    }
}

fn read_jsonl(path: &Path, config: &IngestConfig, out: &mut Vec<Document>) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = raw.id.ok_or_else(|| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: "missing field `id`".into(),
        })?;
        let lang = match raw.lang {
            Some(l) if !l.is_empty() => l,
            _ => {
                return Err(Error::MissingField {
                    record: id,
                    field: "lang",
                })
            }
        };
        let text = raw.text.ok_or_else(|| Error::MissingField {
            record: id.clone(),
            field: "text",
        })?;
        if text.is_empty() && !config.allow_empty_text {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("record `{id}` has empty text"),
            });
        }
        out.push(Document {
            id,
            lang: LanguageTag(lang),
            text,
        });
    }
    Ok(())
}
