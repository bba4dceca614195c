use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageTag, TokenizerSpec};
use crate::error::{Error, Result};
use crate::inference::{ensemble_token_log_probs, Router};
use crate::lm::{sequence_log_probs, LmParams, Real};
use crate::seeding::derive_seed;

/// Placeholder in a template that receives the choice text.
pub const MASK: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    /// Values for `{name}` placeholders in the template.
    pub fields: BTreeMap<String, String>,
    /// Texts for the mask slot; empty means the task verbalizers.
    #[serde(default)]
    pub choices: Vec<String>,
    pub gold: usize,
}

/// A multiple-choice task: every choice is rendered into the template and
/// scored, and the highest-scoring choice is the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclTask {
    pub name: String,
    /// Language of the task text, used to pick a top-1 expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<LanguageTag>,
    /// E.g. `"{premise}, right? [MASK], {hypothesis}"`.
    pub template: String,
    #[serde(default)]
    pub verbalizers: Vec<String>,
    pub examples: Vec<IclExample>,
}

impl IclTask {
    pub fn choices<'a>(&'a self, example: &'a IclExample) -> &'a [String] {
        if example.choices.is_empty() {
            &self.verbalizers
        } else {
            &example.choices
        }
    }

    /// Template with fields substituted and the mask replaced by `choice`.
    /// Returns the text and the byte offset at which the choice starts.
    pub fn render(&self, example: &IclExample, choice: &str) -> Result<(String, usize)> {
        let mut text = self.template.clone();
        for (k, v) in &example.fields {
            text = text.replace(&format!("{{{k}}}"), v);
        }
        if let Some(open) = text.find('{').filter(|&i| text[i..].contains('}')) {
            let end = open + text[open..].find('}').unwrap();
            return Err(Error::InvalidArgument(format!(
                "task `{}`: template field `{}` has no value",
                self.name,
                &text[open + 1..end]
            )));
        }
        let at = text.find(MASK).ok_or_else(|| {
            Error::InvalidArgument(format!("task `{}`: template has no {MASK} slot", self.name))
        })?;
        text.replace_range(at..at + MASK.len(), choice);
        Ok((text, at))
    }

    /// Exactly one in-range gold label per example and non-empty prompts.
    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::EmptySelection(format!(
                "task `{}` has no examples",
                self.name
            )));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            let choices = self.choices(ex);
            if choices.len() < 2 || ex.gold >= choices.len() {
                return Err(Error::InvalidArgument(format!(
                    "task `{}` example {i}: gold {} with {} choices",
                    self.name,
                    ex.gold,
                    choices.len()
                )));
            }
            for c in choices {
                if self.render(ex, c)?.0.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "task `{}` example {i}: empty prompt",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Anything that assigns per-token log-probabilities to a token sequence.
pub trait SequenceScorer {
    fn max_seq_len(&self) -> usize;
    /// Log-probability of `ids[t+1]` given `ids[..=t]`.
    fn token_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>>;
}

impl<F: Real> SequenceScorer for LmParams<F> {
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn token_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        sequence_log_probs(self, ids)
    }
}

/// A routed ensemble scoring with per-position weights.
pub struct EnsembleScorer<'a, F> {
    pub experts: Vec<&'a LmParams<F>>,
    pub router: &'a dyn Router,
    pub stride: usize,
}

impl<F: Real> SequenceScorer for EnsembleScorer<'_, F> {
    fn max_seq_len(&self) -> usize {
        self.experts
            .iter()
            .map(|p| p.config.max_seq_len)
            .min()
            .unwrap_or(0)
    }

    fn token_log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        ensemble_token_log_probs(&self.experts, self.router, ids, self.stride)
    }
}

/// Which tokens of a rendered prompt count toward its score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScope {
    #[default]
    FullPrompt,
    /// From the start of the choice text to the end of the prompt.
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclConfig {
    pub scope: ScoreScope,
    /// Divide the summed log-probability by the number of scored tokens.
    pub length_normalize: bool,
}

/// An [`IclResult`] labelled with the model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclRecord {
    pub model: String,
    pub result: IclResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclResult {
    pub task: String,
    pub shots: usize,
    pub config: IclConfig,
    /// Mean of `run_accuracies`.
    pub accuracy: f64,
    pub run_accuracies: Vec<f64>,
    /// `predictions[run][example]`.
    pub predictions: Vec<Vec<usize>>,
}

/// Index of the highest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

const SEPARATOR: &str = "\n";

fn score_prompt(
    scorer: &dyn SequenceScorer,
    demos: &str,
    text: &str,
    choice_at: usize,
    cfg: &IclConfig,
    example: usize,
) -> Result<f64> {
    let tok = TokenizerSpec::default();
    let full = format!("{demos}{text}");
    let ids = tok.encode(&full, false);
    let mut with_bos = Vec::with_capacity(ids.len() + 1);
    with_bos.push(tok.bos);
    with_bos.extend(ids);
    if with_bos.len() > scorer.max_seq_len() + 1 {
        return Err(Error::PromptTooLong {
            example,
            len: with_bos.len() - 1,
            max: scorer.max_seq_len(),
        });
    }
    let lp = scorer.token_log_probs(&with_bos)?;
    // lp[t] scores byte t of `full`; byte tokenization keeps offsets aligned.
    let first = match cfg.scope {
        ScoreScope::FullPrompt => 0,
        ScoreScope::Completion => demos.len() + choice_at,
    };
    let scored = &lp[first.min(lp.len())..];
    let sum: f64 = scored.iter().sum();
    Ok(if cfg.length_normalize && !scored.is_empty() {
        sum / scored.len() as f64
    } else {
        sum
    })
}

/// Accuracy of argmax-score prediction, averaged over `n_runs` draws of
/// `shots` demonstrations (sampled from the other examples, rendered with
/// their gold choice and prepended).
pub fn icl_evaluate(
    scorer: &dyn SequenceScorer,
    task: &IclTask,
    shots: usize,
    n_runs: usize,
    seed: u64,
    cfg: &IclConfig,
) -> Result<IclResult> {
    task.validate()?;
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    if shots >= task.examples.len() {
        return Err(Error::InvalidArgument(format!(
            "{shots} shots need more than {} examples",
            task.examples.len()
        )));
    }
    let mut predictions = Vec::with_capacity(n_runs);
    let mut run_accuracies = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("icl-{}-run-{run}", task.name)));
        let mut preds = Vec::with_capacity(task.examples.len());
        let mut correct = 0;
        for (i, ex) in task.examples.iter().enumerate() {
            let mut demos = String::new();
            for j in sample(&mut rng, task.examples.len() - 1, shots) {
                let d = &task.examples[if j >= i { j + 1 } else { j }];
                demos.push_str(&task.render(d, &task.choices(d)[d.gold])?.0);
                demos.push_str(SEPARATOR);
            }
            let scores = task
                .choices(ex)
                .iter()
                .map(|c| {
                    let (text, at) = task.render(ex, c)?;
                    score_prompt(scorer, &demos, &text, at, cfg, i)
                })
                .collect::<Result<Vec<f64>>>()?;
            let p = predict(&scores);
            correct += usize::from(p == ex.gold);
            preds.push(p);
        }
        run_accuracies.push(correct as f64 / task.examples.len() as f64);
        predictions.push(preds);
    }
    Ok(IclResult {
        task: task.name.clone(),
        shots,
        config: *cfg,
        accuracy: run_accuracies.iter().sum::<f64>() / n_runs as f64,
        run_accuracies,
        predictions,
    })
}
