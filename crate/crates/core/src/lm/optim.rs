use serde::{Deserialize, Serialize};

use super::{LmParams, Real};
use crate::error::{Error, Result};

/// Adam hyperparameters and the linear-decay schedule peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default = "OptimizerConfig::desk", deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    /// Peak learning rate 1.5e-4, suited to billion-parameter experts.
    /// Desk-scale models train well with a larger peak (see [`OptimizerConfig::desk`]).
    fn default() -> Self {
        Self {
            max_lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn desk() -> Self {
        Self {
            max_lr: 1e-3,
            ..Self::default()
        }
    }
}

/// Adam moments plus the position in a linear-decay schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: OptimizerConfig,
    pub step: usize,
    pub total_steps: usize,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &LmParams<F>, config: OptimizerConfig, total_steps: usize) -> Self {
        let shapes: Vec<usize> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.len())
            .collect();
        Self {
            config,
            step: 0,
            total_steps,
            first: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// `max_lr * (1 - step / total_steps)`.
    pub fn learning_rate(&self) -> f64 {
        learning_rate(self.config.max_lr, self.step, self.total_steps)
    }
}

pub fn learning_rate(max_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    max_lr * (1.0 - step as f64 / total_steps as f64)
}

/// One bias-corrected Adam update at the current scheduled learning rate.
pub fn adam_step<F: Real>(
    params: &mut LmParams<F>,
    grads: &LmParams<F>,
    opt: &mut OptimizerState<F>,
) -> Result<()> {
    if opt.step >= opt.total_steps {
        return Err(Error::ScheduleExhausted {
            step: opt.step,
            total: opt.total_steps,
        });
    }
    for (name, g) in grads.named_tensors() {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let lr = opt.learning_rate();
    let OptimizerConfig {
        beta1,
        beta2,
        epsilon,
        ..
    } = opt.config;
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (F::from_f64_lossy(beta1), F::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (
        F::from_f64_lossy(1.0 - beta1),
        F::from_f64_lossy(1.0 - beta2),
    );
    let (inv_bc1, inv_bc2) = (F::from_f64_lossy(1.0 / bc1), F::from_f64_lossy(1.0 / bc2));
    let (lr, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(epsilon));

    for (((_, p), (_, g)), (m, v)) in params
        .named_tensors_mut()
        .into_iter()
        .zip(grads.named_tensors())
        .zip(opt.first.iter_mut().zip(opt.second.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let m_hat = *mv * inv_bc1;
            let v_hat = *vv * inv_bc2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    opt.step += 1;
    Ok(())
}
