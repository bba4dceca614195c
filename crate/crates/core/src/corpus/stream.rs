use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusStore, LanguageTag, Split, TokenizerSpec};
use crate::error::{Error, Result};

/// One training/eval batch, row-major `[batch_size, seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    /// `true` where the target is real (not padding).
    pub mask: Vec<bool>,
}

impl TokenBatch {
    /// A single unpadded sequence: inputs are `ids[..n-1]`, targets `ids[1..]`.
    pub fn from_sequence(ids: &[u32]) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::InvalidArgument(
                "a sequence needs at least 2 tokens to form a target".into(),
            ));
        }
        let n = ids.len() - 1;
        Ok(Self {
            batch_size: 1,
            seq_len: n,
            tokens: ids[..n].to_vec(),
            targets: ids[1..].to_vec(),
            mask: vec![true; n],
        })
    }

    /// Pad variable-length sequences into one batch.
    pub fn from_sequences(seqs: &[Vec<u32>], pad: u32) -> Result<Self> {
        let seq_len = seqs
            .iter()
            .map(|s| s.len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        if seqs.is_empty() || seq_len == 0 {
            return Err(Error::InvalidArgument("no sequence with a target".into()));
        }
        let mut batch = Self {
            batch_size: seqs.len(),
            seq_len,
            tokens: vec![pad; seqs.len() * seq_len],
            targets: vec![pad; seqs.len() * seq_len],
            mask: vec![false; seqs.len() * seq_len],
        };
        for (b, seq) in seqs.iter().enumerate() {
            for t in 0..seq.len().saturating_sub(1) {
                let i = b * seq_len + t;
                batch.tokens[i] = seq[t];
                batch.targets[i] = seq[t + 1];
                batch.mask[i] = true;
            }
        }
        Ok(batch)
    }

    /// Number of unmasked target tokens.
    pub fn target_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Which documents feed a stream.
#[derive(Debug, Clone)]
pub enum DocFilter {
    All,
    Languages(BTreeSet<LanguageTag>),
    Documents(HashSet<String>),
}

impl DocFilter {
    pub fn accepts(&self, id: &str, lang: &LanguageTag) -> bool {
        match self {
            DocFilter::All => true,
            DocFilter::Languages(langs) => langs.contains(lang),
            DocFilter::Documents(ids) => ids.contains(id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reshuffle and start a new epoch when the documents run out.
    pub repeat: bool,
}

impl StreamConfig {
    pub fn batch_tokens(&self) -> usize {
        self.seq_len * self.batch_size
    }
}

/// Packs BOS/EOS-delimited documents from the train split into fixed-size
/// batches. Each row covers `seq_len + 1` consecutive stream tokens and
/// consecutive rows overlap by one token, so every stream token after the
/// first is a target exactly once.
pub struct BatchStream {
    docs: Vec<Vec<u32>>,
    order: Vec<usize>,
    cursor: usize,
    buffer: Vec<u32>,
    rng: ChaCha8Rng,
    config: StreamConfig,
    tokens_emitted: u64,
    exhausted: bool,
}

/// Create a deterministic batch stream over the train split of `store`.
pub fn stream_batches(
    store: &CorpusStore,
    filter: &DocFilter,
    config: StreamConfig,
) -> Result<BatchStream> {
    if config.seq_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "seq_len must be at least 2, got {}",
            config.seq_len
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let tok = TokenizerSpec::default();
    let docs: Vec<Vec<u32>> = store
        .documents()
        .iter()
        .enumerate()
        .filter(|(i, d)| store.split_of(*i) == Split::Train && filter.accepts(&d.id, &d.lang))
        .map(|(_, d)| tok.encode(&d.text, true))
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no training documents match {filter:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    Ok(BatchStream {
        docs,
        order,
        cursor: 0,
        buffer: Vec::new(),
        rng,
        config,
        tokens_emitted: 0,
        exhausted: false,
    })
}

impl BatchStream {
    /// Target tokens emitted so far.
    pub fn tokens_emitted(&self) -> u64 {
        self.tokens_emitted
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    fn fill(&mut self, needed: usize) -> bool {
        while self.buffer.len() < needed {
            if self.cursor == self.order.len() {
                if !self.config.repeat {
                    return false;
                }
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let doc = &self.docs[self.order[self.cursor]];
            self.buffer.extend_from_slice(doc);
            self.cursor += 1;
        }
        true
    }
}

impl Iterator for BatchStream {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.exhausted {
            return None;
        }
        let StreamConfig {
            seq_len,
            batch_size,
            ..
        } = self.config;
        let mut tokens = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            if !self.fill(seq_len + 1) {
                self.exhausted = true;
                return None;
            }
            tokens.extend_from_slice(&self.buffer[..seq_len]);
            targets.extend_from_slice(&self.buffer[1..=seq_len]);
            self.buffer.drain(..seq_len);
        }
        self.tokens_emitted += (batch_size * seq_len) as u64;
        Some(TokenBatch {
            batch_size,
            seq_len,
            tokens,
            targets,
            mask: vec![true; batch_size * seq_len],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn store() -> CorpusStore {
        let docs = (0..6)
            .map(|i| {
                let lang = if i % 2 == 0 { "en" } else { "fr" };
                Document::new(
                    format!("d{i}"),
                    lang,
                    "lorem ipsum dolor sit amet ".repeat(i + 1),
                )
            })
            .collect();
        CorpusStore::from_documents(docs).unwrap()
    }

    fn cfg(seed: u64) -> StreamConfig {
        StreamConfig {
            seq_len: 8,
            batch_size: 2,
            seed,
            repeat: true,
        }
    }

    #[test]
    fn batches_have_shifted_targets() {
        let s = store();
        for batch in stream_batches(&s, &DocFilter::All, cfg(1))
            .unwrap()
            .take(20)
        {
            assert_eq!(batch.tokens.len(), 16);
            for b in 0..2 {
                for t in 0..7 {
                    assert_eq!(batch.targets[b * 8 + t], batch.tokens[b * 8 + t + 1]);
                }
            }
            assert!(batch.tokens.iter().all(|&t| (t as usize) < 259));
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let s = store();
        let a: Vec<_> = stream_batches(&s, &DocFilter::All, cfg(5))
            .unwrap()
            .take(30)
            .collect();
        let b: Vec<_> = stream_batches(&s, &DocFilter::All, cfg(5))
            .unwrap()
            .take(30)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn token_count_matches_independent_count() {
        let s = store();
        let mut stream = stream_batches(&s, &DocFilter::All, cfg(2)).unwrap();
        let batches: Vec<_> = stream.by_ref().take(13).collect();
        let counted: usize = batches
            .iter()
            .map(|b| b.mask.iter().filter(|&&m| m).count())
            .sum();
        assert_eq!(stream.tokens_emitted(), counted as u64);
        assert_eq!(counted, 13 * 2 * 8);
    }

    #[test]
    fn language_filter_and_empty_selection() {
        let s = store();
        let only_en = DocFilter::Languages([LanguageTag::from("en")].into());
        let mut stream = stream_batches(&s, &only_en, cfg(0)).unwrap();
        assert!(stream.next().is_some());
        let none = DocFilter::Languages([LanguageTag::from("sw")].into());
        assert!(matches!(
            stream_batches(&s, &none, cfg(0)),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn non_repeating_stream_ends() {
        let s = store();
        let mut c = cfg(0);
        c.repeat = false;
        let n = stream_batches(&s, &DocFilter::All, c).unwrap().count();
        let total: usize = s.documents().iter().map(|d| d.text.len() + 2).sum();
        assert_eq!(n, (total - 1) / 16);
    }
}
