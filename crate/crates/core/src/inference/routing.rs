use serde::{Deserialize, Serialize};

use crate::allocation::{squared_distance, ClusterKind, ClusterModel};
use crate::btm::{ExpertScope, ExpertSet};
use crate::corpus::LanguageTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    /// Softmax temperature over negative squared distances.
    pub temperature: f64,
    /// Keep only the `m` heaviest experts per step; `None` keeps all.
    pub top_m: Option<usize>,
    /// Recompute weights every this many tokens.
    pub context_stride: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            top_m: None,
            context_stride: 1,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.context_stride == 0 {
            return Err(Error::InvalidArgument(
                "context_stride must be at least 1".into(),
            ));
        }
        if let Some(m) = self.top_m {
            check_m(m, k)?;
        }
        Ok(())
    }
}

fn check_m(m: usize, k: usize) -> Result<()> {
    if m == 0 || m > k {
        return Err(Error::InvalidArgument(format!(
            "top-m must lie in [1, {k}], got {m}"
        )));
    }
    Ok(())
}

/// Mixture weights over experts, on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights(pub Vec<f64>);

impl RoutingWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&a| a > 0.0)
            .map(|&a| a * a.ln())
            .sum::<f64>()
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &a) in self.0.iter().enumerate() {
            if a > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// `alpha_e ∝ exp(-d_e / T)` for squared distances `d_e`.
pub fn weights_from_squared_distances(sq_distances: &[f64], temperature: f64) -> RoutingWeights {
    let logits: Vec<f64> = sq_distances.iter().map(|d| -d / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    RoutingWeights(exps.into_iter().map(|e| e / total).collect())
}

/// Weights from the TF-IDF distance between `context` and each centroid.
/// A context with no in-vocabulary word gets uniform weights.
pub fn route_weights(
    context: &str,
    model: &ClusterModel,
    cfg: &RoutingConfig,
) -> Result<RoutingWeights> {
    if model.kind != ClusterKind::Tfidf {
        return Err(Error::InvalidArgument(format!(
            "routing needs a TF-IDF cluster model, `{}` is {}",
            model.id, model.kind
        )));
    }
    cfg.validate(model.k)?;
    let tfidf = model.tfidf.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("cluster model `{}` has no vectorizer", model.id))
    })?;
    let v = tfidf.transform(context);
    if v.is_zero() {
        return Ok(RoutingWeights::uniform(model.k));
    }
    let d: Vec<f64> = model
        .centroids
        .iter()
        .map(|c| squared_distance(&v, c))
        .collect();
    Ok(weights_from_squared_distances(&d, cfg.temperature))
}

/// Keep the `m` largest weights (ties to the lower index), zero the rest,
/// and renormalize. The smallest kept weight absorbs the rounding residual
/// so the result sums to exactly one.
pub fn sparsify(alpha: &RoutingWeights, m: usize) -> Result<RoutingWeights> {
    let k = alpha.len();
    check_m(m, k)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| alpha.0[b].total_cmp(&alpha.0[a]).then(a.cmp(&b)));
    let (kept, dropped) = order.split_at(m);
    if dropped.iter().all(|&i| alpha.0[i] == 0.0) {
        return Ok(alpha.clone());
    }
    let mass: f64 = kept.iter().map(|&i| alpha.0[i]).sum();
    if mass <= 0.0 {
        return Ok(RoutingWeights::one_hot(k, kept[0]));
    }
    let mut out = vec![0.0; k];
    for &i in &kept[..m - 1] {
        out[i] = alpha.0[i] / mass;
    }
    let rest: f64 = kept[..m - 1].iter().map(|&i| out[i]).sum();
    out[kept[m - 1]] = (1.0 - rest).max(0.0);
    Ok(RoutingWeights(out))
}

/// Expert to use alone for `lang`: the covering expert of a language-scoped
/// set, or the expert holding the largest share of the language's data
/// (ties to the lowest index).
pub fn top1_select<'a>(set: &'a ExpertSet, lang: &LanguageTag) -> Result<&'a str> {
    let experts = set.experts_of(&set.cluster_model_id);
    let mut best: Option<(&str, f64)> = None;
    for e in &experts {
        let weight = match &e.scope {
            ExpertScope::Languages { languages } => {
                if languages.contains(lang) {
                    return Ok(&e.expert_id);
                }
                continue;
            }
            ExpertScope::DataShare { share } => share.get(lang).copied().unwrap_or(0.0),
        };
        if best.is_none_or(|(_, w)| weight > w) {
            best = Some((&e.expert_id, weight));
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::UncoveredLanguage(lang.to_string()))
}
