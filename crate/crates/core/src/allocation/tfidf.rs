use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, then split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Sparse vector as `(index, value)` pairs in ascending index order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector(pub Vec<(usize, f64)>);

impl SparseVector {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&(_, v)| v == 0.0)
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|&(_, v)| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.0.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.0 {
            out[i] = v;
        }
        out
    }
}

/// Word-level TF-IDF with smooth idf, raw term counts and L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    /// Term to column index; columns are assigned in alphabetical term order.
    pub vocabulary: BTreeMap<String, usize>,
    /// `idf[i] = ln((1 + N) / (1 + df_i)) + 1`.
    pub idf: Vec<f64>,
    pub n_documents: usize,
}

impl TfIdfModel {
    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    /// TF-IDF vector of `text`: unit L2 norm, or zero if no term is in the vocabulary.
    pub fn transform(&self, text: &str) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for word in tokenize(text) {
            if let Some(&i) = self.vocabulary.get(&word) {
                *counts.entry(i).or_insert(0.0) += 1.0;
            }
        }
        let mut v: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(i, tf)| (i, tf * self.idf[i]))
            .collect();
        let norm = v.iter().map(|&(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, x) in &mut v {
                *x /= norm;
            }
        }
        SparseVector(v)
    }
}

/// Fit a vocabulary of the `max_features` most frequent terms (ties broken
/// lexicographically) and their smooth idf weights.
pub fn fit_tfidf<'a>(
    docs: impl IntoIterator<Item = &'a str>,
    max_features: usize,
) -> Result<TfIdfModel> {
    if max_features == 0 {
        return Err(Error::InvalidArgument(
            "max_features must be positive".into(),
        ));
    }
    let mut frequency: HashMap<String, u64> = HashMap::new();
    let mut doc_frequency: HashMap<String, u64> = HashMap::new();
    let mut n_documents = 0usize;
    for doc in docs {
        n_documents += 1;
        let mut seen: Vec<String> = Vec::new();
        for word in tokenize(doc) {
            *frequency.entry(word.clone()).or_insert(0) += 1;
            seen.push(word);
        }
        seen.sort_unstable();
        seen.dedup();
        for word in seen {
            *doc_frequency.entry(word).or_insert(0) += 1;
        }
    }
    if frequency.is_empty() {
        return Err(Error::EmptySelection(
            "TF-IDF fit needs at least one document with a word".into(),
        ));
    }
    let mut ranked: Vec<(String, u64)> = frequency.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_features);
    let mut terms: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
    terms.sort_unstable();

    let n = n_documents as f64;
    let idf = terms
        .iter()
        .map(|t| ((1.0 + n) / (1.0 + doc_frequency[t] as f64)).ln() + 1.0)
        .collect();
    let vocabulary = terms.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
    Ok(TfIdfModel {
        vocabulary,
        idf,
        n_documents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_document_hand_computation() {
        let m = fit_tfidf(["a a b"], 10).unwrap();
        assert_eq!(m.idf, vec![1.0, 1.0]);
        let v = m.transform("a a b");
        let s5 = 5f64.sqrt();
        assert_eq!(v.0.len(), 2);
        assert!((v.0[0].1 - 2.0 / s5).abs() < 1e-12);
        assert!((v.0[1].1 - 1.0 / s5).abs() < 1e-12);
    }

    #[test]
    fn ubiquitous_term_has_unit_idf() {
        let m = fit_tfidf(["x y", "x z", "x"], 10).unwrap();
        assert_eq!(m.idf[m.vocabulary["x"]], 1.0);
        let expect = (4.0f64 / 2.0).ln() + 1.0;
        assert!((m.idf[m.vocabulary["y"]] - expect).abs() < 1e-15);
    }

    #[test]
    fn max_features_keeps_most_frequent_with_lexicographic_ties() {
        let m = fit_tfidf(["a b", "a c"], 1).unwrap();
        assert_eq!(m.vocabulary.keys().collect::<Vec<_>>(), vec!["a"]);
        let m = fit_tfidf(["c b", "a d"], 2).unwrap();
        assert_eq!(m.vocabulary.keys().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn out_of_vocabulary_is_zero_and_empty_fit_fails() {
        let m = fit_tfidf(["a b"], 10).unwrap();
        assert!(m.transform("zzz, qq!").is_zero());
        assert!(fit_tfidf(["", " ,. "], 10).is_err());
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        let words: Vec<String> = tokenize("Hello, WORLD--foo_bar 42").collect();
        assert_eq!(words, vec!["hello", "world", "foo", "bar", "42"]);
    }

    #[test]
    fn repetition_does_not_change_vector() {
        let m = fit_tfidf(["a b c", "a d"], 10).unwrap();
        let one = m.transform("a b");
        let two = m.transform("a b a b");
        for (x, y) in one.0.iter().zip(&two.0) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn nonzero_outputs_have_unit_norm(words in proptest::collection::vec("[a-e]{1,3}", 0..20)) {
            let m = fit_tfidf(["a b c d e ab abc", "b c dd"], 50).unwrap();
            let v = m.transform(&words.join(" "));
            if !v.is_zero() {
                prop_assert!((v.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
