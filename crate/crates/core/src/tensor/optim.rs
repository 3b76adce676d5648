use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightDecayMode {
    /// `grad += wd · param` before the moment updates (classical Adam).
    #[default]
    Coupled,
    /// `param *= 1 − lr · wd`, independent of the moments (AdamW).
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            mode: WeightDecayMode::Coupled,
        }
    }
}

/// Per-parameter moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        OptimState {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: OptimState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Adam {
            config,
            state: OptimState::for_params(params),
        }
    }

    /// One bias-corrected adaptive-moment update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.first.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.state.first.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.state.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dims("adam", p.shape(), g.shape()));
            }
        }
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (eps, wd, lr_t) = (T::of(c.eps), T::of(c.weight_decay), T::of(lr));
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.state.first[i].data_mut();
            let v = self.state.second[i].data_mut();
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let mut gj = g[j];
                match c.mode {
                    WeightDecayMode::Coupled => gj += wd * *pv,
                    WeightDecayMode::Decoupled => *pv *= one - lr_t * wd,
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pv -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to zero at `total`, or, with a
/// warm-restart period, the same curve repeated every `period` steps.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, warm_restart: Option<usize>) -> f64 {
    let (pos, span) = match warm_restart {
        Some(period) if period > 0 => (step % period, period),
        _ => (step.min(total), total.max(1)),
    };
    0.5 * base_lr * (1.0 + (PI * pos as f64 / span as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub restart_period: Option<usize>,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self.total_steps, self.base_lr, self.restart_period)
    }
}
