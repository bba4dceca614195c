//! A small pre-norm decoder-only transformer with hand-written
//! backpropagation, Adam with linear decay, and a binary checkpoint format.

pub mod checkpoint;
mod config;
mod model;
mod optim;
mod params;
mod perplexity;
mod real;
mod train;

pub use config::LmConfig;
pub use model::{
    forward, log_softmax, loss, loss_and_grads, next_token_log_distributions, sequence_log_probs,
    Logits,
};
pub use optim::{adam_step, learning_rate, OptimizerConfig, OptimizerState};
pub use params::{init_params, LayerParams, LmParams, Tensor, INIT_STD};
pub(crate) use perplexity::windows;
pub use perplexity::{document_nll, perplexity, NllSum};
pub use real::Real;
pub use train::{steps_for_budget, train, LossPoint, TrainConfig, TrainReport};
