//! Deterministic synthetic multilingual corpora.
//!
//! Each language has its own letter inventory, lexicon (words built from its
//! letters with language-specific letter preferences) and word-bigram
//! grammar. Inventories overlap: all languages share the vowels, and related
//! languages share most consonants. A derived language copies a parent's
//! grammar and rewrites a fraction of its words, making it typologically
//! close to the parent.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LanguageFeatures, LanguageTag};
use crate::error::{Error, Result};
use crate::eval::{IclExample, IclTask, MASK};
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub code: String,
    /// Letter inventory; lowercase ASCII.
    pub letters: String,
    /// Derive from this language's grammar instead of drawing a fresh one.
    #[serde(default)]
    pub derived_from: Option<String>,
    /// Fraction of the parent's words rewritten when derived.
    #[serde(default)]
    pub mutation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub languages: Vec<LanguageSpec>,
    pub lexicon_size: usize,
    /// Successors per word in the bigram grammar.
    pub branching: usize,
    pub docs_per_language: usize,
    pub sentences_per_doc: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Two related pairs (`l0`, `l1`) and (`l2`, `l3`) plus `l4`, derived from `l0`.
    fn default() -> Self {
        let lang = |code: &str, letters: &str| LanguageSpec {
            code: code.into(),
            letters: letters.into(),
            derived_from: None,
            mutation_rate: 0.0,
        };
        Self {
            languages: vec![
                lang("l0", "aeioustbdgkmp"),
                lang("l1", "aeioustbdgkmc"),
                lang("l2", "aeioustfhlnrw"),
                lang("l3", "aeioustfhlnry"),
                LanguageSpec {
                    code: "l4".into(),
                    letters: "aeioustbdgkmp".into(),
                    derived_from: Some("l0".into()),
                    mutation_rate: 0.35,
                },
            ],
            lexicon_size: 160,
            branching: 6,
            docs_per_language: 400,
            sentences_per_doc: (8, 14),
            words_per_sentence: (4, 11),
            seed: 20240613,
        }
    }
}

/// A sampled language: lexicon plus bigram grammar.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub words: Vec<String>,
    start: WeightedIndex<f64>,
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    letter_weights: Vec<f64>,
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / (r as f64).powf(exponent)).collect()
}

fn sample_word(letters: &[char], weights: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(2..=7);
    (0..len).map(|_| letters[weights.sample(rng)]).collect()
}

fn unique_words(
    count: usize,
    letters: &[char],
    weights: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
    mut seed_words: Vec<String>,
) -> Vec<String> {
    let mut seen: std::collections::HashSet<String> = seed_words.iter().cloned().collect();
    while seed_words.len() < count {
        let w = sample_word(letters, weights, rng);
        if seen.insert(w.clone()) {
            seed_words.push(w);
        }
    }
    seed_words
}

impl Grammar {
    fn fresh(
        letters: &[char],
        lexicon_size: usize,
        branching: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let letter_weights: Vec<f64> = (0..letters.len())
            .map(|_| rng.random_range(0.05..1.0f64).powi(2))
            .collect();
        let lw = WeightedIndex::new(&letter_weights)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let words = unique_words(lexicon_size, letters, &lw, rng, Vec::new());
        let successors = (0..lexicon_size)
            .map(|_| Self::successor_row(lexicon_size, branching, rng))
            .collect::<Result<_>>()?;
        let start = WeightedIndex::new(zipf_weights(lexicon_size, 1.0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self {
            words,
            start,
            successors,
            letter_weights,
        })
    }

    fn successor_row(
        n: usize,
        branching: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, WeightedIndex<f64>)> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(branching.min(n));
        let w = WeightedIndex::new(zipf_weights(idx.len(), 1.2))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok((idx, w))
    }

    fn derived(
        parent: &Grammar,
        letters: &[char],
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let lw = WeightedIndex::new(&parent.letter_weights)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut words = parent.words.clone();
        let mut seen: std::collections::HashSet<String> = words.iter().cloned().collect();
        for w in words.iter_mut() {
            if rng.random::<f64>() < rate {
                loop {
                    let candidate = sample_word(letters, &lw, rng);
                    if seen.insert(candidate.clone()) {
                        *w = candidate;
                        break;
                    }
                }
            }
        }
        Ok(Self {
            words,
            start: parent.start.clone(),
            successors: parent.successors.clone(),
            letter_weights: parent.letter_weights.clone(),
        })
    }

    /// `len` words following the bigram grammar from a sampled start word.
    pub fn words(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<&str> {
        let mut w = self.start.sample(rng);
        let mut out = vec![self.words[w].as_str()];
        for _ in 1..len {
            let (next, weights) = &self.successors[w];
            w = next[weights.sample(rng)];
            out.push(self.words[w].as_str());
        }
        out
    }

    pub fn sentence(&self, len: usize, rng: &mut ChaCha8Rng) -> String {
        let mut s = self.words(len, rng).join(" ");
        s.push('.');
        s
    }
}

/// A generated corpus with its per-language grammars.
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub grammars: BTreeMap<LanguageTag, Grammar>,
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let mut grammars: BTreeMap<LanguageTag, Grammar> = BTreeMap::new();
    for lang in &config.languages {
        let letters: Vec<char> = lang.letters.chars().collect();
        if letters.is_empty() || !letters.iter().all(char::is_ascii_lowercase) {
            return Err(Error::InvalidArgument(format!(
                "language `{}` needs a non-empty lowercase ASCII inventory",
                lang.code
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("grammar-{}", lang.code)));
        let grammar = match &lang.derived_from {
            None => Grammar::fresh(&letters, config.lexicon_size, config.branching, &mut rng)?,
            Some(parent) => {
                let parent = grammars
                    .get(&LanguageTag::from(parent.as_str()))
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "`{}` derives from unknown `{parent}`",
                            lang.code
                        ))
                    })?;
                Grammar::derived(parent, &letters, lang.mutation_rate, &mut rng)?
            }
        };
        grammars.insert(LanguageTag::from(lang.code.as_str()), grammar);
    }
    let mut documents = Vec::new();
    for lang in &config.languages {
        let tag = LanguageTag::from(lang.code.as_str());
        let grammar = &grammars[&tag];
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("docs-{}", lang.code)));
        for i in 0..config.docs_per_language {
            let n = rng.random_range(config.sentences_per_doc.0..=config.sentences_per_doc.1);
            let text: Vec<String> = (0..n)
                .map(|_| {
                    let len =
                        rng.random_range(config.words_per_sentence.0..=config.words_per_sentence.1);
                    grammar.sentence(len, &mut rng)
                })
                .collect();
            documents.push(Document::new(
                format!("{}-{i:04}", lang.code),
                tag.clone(),
                text.join(" "),
            ));
        }
    }
    Ok(SyntheticCorpus {
        documents,
        grammars,
    })
}

/// A two-choice sentence-completion task in `lang`: each example gives the
/// first `context_words` words of a grammatical sentence, the gold ending
/// continues it and the distractor is a sentence fragment from another
/// language. Choice order is random.
pub fn cloze_task(
    corpus: &SyntheticCorpus,
    lang: &LanguageTag,
    examples: usize,
    context_words: usize,
    ending_words: usize,
    seed: u64,
) -> Result<IclTask> {
    let grammar = corpus
        .grammars
        .get(lang)
        .ok_or_else(|| Error::InvalidArgument(format!("no grammar for `{lang}`")))?;
    let others: Vec<&Grammar> = corpus
        .grammars
        .iter()
        .filter(|(l, _)| *l != lang)
        .map(|(_, g)| g)
        .collect();
    if others.is_empty() {
        return Err(Error::InvalidArgument(
            "cloze distractors need a second language".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("cloze-{lang}")));
    let examples = (0..examples)
        .map(|_| {
            let words = grammar.words(context_words + ending_words, &mut rng);
            let other = others[rng.random_range(0..others.len())];
            let distractor = other.words(ending_words, &mut rng).join(" ");
            let gold_text = words[context_words..].join(" ");
            let gold = rng.random_range(0..2);
            let choices = if gold == 0 {
                vec![gold_text, distractor]
            } else {
                vec![distractor, gold_text]
            };
            IclExample {
                fields: [("context".to_string(), words[..context_words].join(" "))].into(),
                choices,
                gold,
            }
        })
        .collect();
    Ok(IclTask {
        name: format!("cloze-{lang}"),
        language: Some(lang.clone()),
        template: format!("{{context}} {MASK}."),
        verbalizers: Vec::new(),
        examples,
    })
}

/// Letter-profile features: the relative frequency of each letter `a..=z`
/// in a language's documents.
pub fn letter_profile_features(documents: &[Document]) -> LanguageFeatures {
    let mut counts: BTreeMap<LanguageTag, Vec<f64>> = BTreeMap::new();
    for d in documents {
        let row = counts
            .entry(d.lang.clone())
            .or_insert_with(|| vec![0.0; 26]);
        for b in d.text.bytes().filter(u8::is_ascii_lowercase) {
            row[(b - b'a') as usize] += 1.0;
        }
    }
    for row in counts.values_mut() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    counts
}
