use super::model::sequence_log_probs;
use super::{LmParams, Real};
use crate::corpus::TokenizerSpec;
use crate::error::{Error, Result};

/// Summed negative log-likelihood and the number of scored targets.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllSum {
    pub total: f64,
    pub count: usize,
}

impl NllSum {
    pub fn add(&mut self, other: NllSum) {
        self.total += other.total;
        self.count += other.count;
    }

    pub fn perplexity(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptySelection("no target tokens to score".into()));
        }
        Ok((self.total / self.count as f64).exp())
    }
}

/// Split `ids` into windows of at most `max_len + 1` tokens, adjacent
/// windows sharing one boundary token, so each target is scored once.
pub(crate) fn windows(ids: &[u32], max_len: usize) -> impl Iterator<Item = &[u32]> {
    let n = ids.len();
    (0..n.saturating_sub(1))
        .step_by(max_len)
        .map(move |start| &ids[start..(start + max_len + 1).min(n)])
}

/// NLL of one document encoded as BOS + text + EOS. Documents longer than
/// the context are scored in consecutive windows without carried context.
pub fn document_nll<F: Real>(params: &LmParams<F>, text: &str) -> Result<NllSum> {
    let ids = TokenizerSpec::default().encode(text, true);
    let mut sum = NllSum::default();
    for w in windows(&ids, params.config.max_seq_len) {
        let lp = sequence_log_probs(params, w)?;
        sum.total -= lp.iter().sum::<f64>();
        sum.count += lp.len();
    }
    Ok(sum)
}

/// `exp(mean per-token NLL)` over all documents, each scored independently.
pub fn perplexity<'a, F: Real>(
    params: &LmParams<F>,
    docs: impl IntoIterator<Item = &'a str>,
) -> Result<f64> {
    let mut sum = NllSum::default();
    for doc in docs {
        sum.add(document_nll(params, doc)?);
    }
    sum.perplexity()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_target_once() {
        let ids: Vec<u32> = (0..10).collect();
        let w: Vec<&[u32]> = windows(&ids, 4).collect();
        assert_eq!(w, vec![&ids[0..5], &ids[4..9], &ids[8..10]]);
        let targets: usize = w.iter().map(|x| x.len() - 1).sum();
        assert_eq!(targets, 9);
        let ids: Vec<u32> = (0..9).collect();
        assert_eq!(windows(&ids, 4).count(), 2);
    }
}
