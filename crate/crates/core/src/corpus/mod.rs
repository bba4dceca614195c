//! Language-tagged corpora, the byte-level tokenizer, and deterministic
//! batch streams.

mod store;
mod stream;
mod tokenizer;

pub use store::{CorpusStore, Document, IngestConfig, LanguageCounts, LanguageTag, Split};
pub use stream::{stream_batches, BatchStream, DocFilter, StreamConfig, TokenBatch};
pub use tokenizer::TokenizerSpec;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Language feature vectors, e.g. typological features per language.
pub type LanguageFeatures = BTreeMap<LanguageTag, Vec<f64>>;

/// Load a `{"<lang>": [f64, ...]}` feature fixture; all vectors must share a length.
pub fn load_language_features(path: &Path) -> Result<LanguageFeatures> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let features: LanguageFeatures = serde_json::from_str(&text)?;
    check_feature_dims(&features)?;
    Ok(features)
}

pub(crate) fn check_feature_dims(features: &LanguageFeatures) -> Result<usize> {
    let mut dim = None;
    for (lang, v) in features {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "feature vector for `{lang}` has length {}, expected {d}",
                    v.len()
                )))
            }
            _ => {}
        }
    }
    Ok(dim.unwrap_or(0))
}
