use super::routing::{route_weights, sparsify, RoutingConfig, RoutingWeights};
use crate::allocation::ClusterModel;
use crate::corpus::TokenizerSpec;
use crate::error::{Error, Result};
use crate::lm::{next_token_log_distributions, windows, LmParams, NllSum, Real};

/// Mixture `p_E = Σ_e α_e p_e`, evaluated relative to the heaviest expert
/// `a` as `p_a + Σ_{e≠a} α_e (p_e − p_a)`. Identical experts or a one-hot
/// weight vector therefore reproduce the expert distribution exactly.
pub fn ensemble_next(dists: &[Vec<f64>], alpha: &RoutingWeights) -> Result<Vec<f64>> {
    if dists.len() != alpha.len() || dists.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} distributions for {} weights",
            dists.len(),
            alpha.len()
        )));
    }
    let v = dists[0].len();
    if let Some(bad) = dists.iter().position(|d| d.len() != v) {
        return Err(Error::DimensionMismatch(format!(
            "distribution {bad} has length {}, expected {v}",
            dists[bad].len()
        )));
    }
    let anchor = alpha.argmax();
    let mut out = dists[anchor].clone();
    for (e, (d, &a)) in dists.iter().zip(&alpha.0).enumerate() {
        if e == anchor || a == 0.0 {
            continue;
        }
        for ((o, &p), &q) in out.iter_mut().zip(d).zip(&dists[anchor]) {
            *o += a * (p - q);
        }
    }
    for o in &mut out {
        *o = o.max(0.0);
    }
    Ok(out)
}

/// Supplies mixture weights from the decoded text prefix.
pub trait Router {
    fn k(&self) -> usize;
    fn weights(&self, prefix: &str) -> Result<RoutingWeights>;
}

/// TF-IDF distance routing with optional top-m sparsification.
pub struct TfidfRouter<'a> {
    pub model: &'a ClusterModel,
    pub config: RoutingConfig,
}

impl<'a> TfidfRouter<'a> {
    pub fn new(model: &'a ClusterModel, config: RoutingConfig) -> Result<Self> {
        config.validate(model.k)?;
        Ok(Self { model, config })
    }
}

impl Router for TfidfRouter<'_> {
    fn k(&self) -> usize {
        self.model.k
    }

    fn weights(&self, prefix: &str) -> Result<RoutingWeights> {
        let alpha = route_weights(prefix, self.model, &self.config)?;
        match self.config.top_m {
            Some(m) => sparsify(&alpha, m),
            None => Ok(alpha),
        }
    }
}

/// The same weights at every step.
pub struct FixedRouter(pub RoutingWeights);

impl Router for FixedRouter {
    fn k(&self) -> usize {
        self.0.len()
    }

    fn weights(&self, _prefix: &str) -> Result<RoutingWeights> {
        Ok(self.0.clone())
    }
}

/// Ensemble log-probability of each token `ids[t+1]` given `ids[..=t]`.
/// Each expert runs one forward pass per context window; weights are
/// recomputed from the decoded prefix every `stride` positions.
pub fn ensemble_token_log_probs<F: Real>(
    experts: &[&LmParams<F>],
    router: &dyn Router,
    ids: &[u32],
    stride: usize,
) -> Result<Vec<f64>> {
    if experts.len() != router.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} experts for a {}-way router",
            experts.len(),
            router.k()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "context_stride must be at least 1".into(),
        ));
    }
    let tok = TokenizerSpec::default();
    let max_len = experts
        .iter()
        .map(|p| p.config.max_seq_len)
        .min()
        .ok_or_else(|| Error::EmptySelection("no experts".into()))?;
    let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
    let mut alpha = RoutingWeights::uniform(router.k());
    for (start, window) in windows(ids, max_len)
        .enumerate()
        .map(|(i, w)| (i * max_len, w))
    {
        let per_expert: Vec<Vec<Vec<f64>>> = experts
            .iter()
            .map(|p| next_token_log_distributions(*p, window))
            .collect::<Result<_>>()?;
        for t in 0..window.len() - 1 {
            let position = start + t;
            if position % stride == 0 {
                alpha = router.weights(&tok.decode(&ids[..=position]))?;
            }
            let dists: Vec<Vec<f64>> = per_expert
                .iter()
                .map(|rows| rows[t].iter().map(|lp| lp.exp()).collect())
                .collect();
            let mix = ensemble_next(&dists, &alpha)?;
            out.push(mix[window[t + 1] as usize].ln());
        }
    }
    Ok(out)
}

/// Summed ensemble NLL of one document (BOS + text + EOS).
pub fn ensemble_document_nll<F: Real>(
    experts: &[&LmParams<F>],
    router: &dyn Router,
    text: &str,
    stride: usize,
) -> Result<NllSum> {
    let ids = TokenizerSpec::default().encode(text, true);
    let lp = ensemble_token_log_probs(experts, router, &ids, stride)?;
    Ok(NllSum {
        total: -lp.iter().sum::<f64>(),
        count: lp.len(),
    })
}

/// `exp(mean NLL)` of the ensemble over documents scored independently.
pub fn ensemble_perplexity<'a, F: Real>(
    experts: &[&LmParams<F>],
    router: &dyn Router,
    docs: impl IntoIterator<Item = &'a str>,
    stride: usize,
) -> Result<f64> {
    let mut sum = NllSum::default();
    for doc in docs {
        sum.add(ensemble_document_nll(experts, router, doc, stride)?);
    }
    sum.perplexity()
}
