//! Serving an expert set: top-1 selection, TF-IDF routing weights,
//! top-m sparsification and ensemble perplexity.

mod ensemble;
mod routing;

pub use ensemble::{
    ensemble_document_nll, ensemble_next, ensemble_perplexity, ensemble_token_log_probs,
    FixedRouter, Router, TfidfRouter,
};
pub use routing::{
    route_weights, sparsify, top1_select, weights_from_squared_distances, RoutingConfig,
    RoutingWeights,
};
