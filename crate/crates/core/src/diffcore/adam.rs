//! Adam with step-decayed learning rate and per-group freezing.

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `decay_interval` steps.
    pub decay: f64,
    pub decay_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.7,
            decay_interval: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate used by the next call to [`step`](Self::step).
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        let k = self.step.checked_div(c.decay_interval).unwrap_or(0);
        c.lr * c.decay.powi(k as i32)
    }

    /// One minimisation step. Entries whose group is in `frozen` keep both
    /// their values and their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[f64], frozen: &[ParamGroup]) {
        assert_eq!(grads.len(), params.num_scalars());
        assert_eq!(self.m.len(), grads.len(), "moments not aligned with parameters");
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let groups = params.scalar_groups();
        let data = params.flatten_mut();
        for i in 0..grads.len() {
            if frozen.contains(&groups[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        params.project();
    }
}
