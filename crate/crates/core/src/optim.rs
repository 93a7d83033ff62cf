//! Adam with bias correction and the learning-rate schedules used by the
//! experiment presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        for (((pi, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { rate: f64 },
    /// `initial` until the first milestone, then the rate of the latest
    /// milestone `(step, rate)` reached.
    Piecewise { initial: f64, milestones: Vec<(usize, f64)> },
    /// Cosine annealing from `start` to `end` over `total` steps.
    Cosine { start: f64, end: f64, total: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            LrSchedule::Constant { rate } if !(*rate > 0.0) => bad(format!("rate must be positive, got {rate}")),
            LrSchedule::Piecewise { initial, milestones } => {
                if !(*initial > 0.0) || milestones.iter().any(|(_, r)| !(*r > 0.0)) {
                    return bad("piecewise rates must be positive".into());
                }
                if milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return bad("piecewise milestones must be strictly increasing".into());
                }
                Ok(())
            }
            LrSchedule::Cosine { start, end, total } => {
                if !(*start > 0.0) || !(*end > 0.0) || *total == 0 {
                    return bad("cosine schedule needs positive rates and total".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { rate } => *rate,
            LrSchedule::Piecewise { initial, milestones } => {
                milestones.iter().take_while(|(at, _)| step >= *at).last().map_or(*initial, |(_, r)| *r)
            }
            LrSchedule::Cosine { start, end, total } => {
                if step >= *total {
                    return *end;
                }
                let progress = step as f64 / *total as f64;
                end + (start - end) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
            }
        }
    }
}
