//! Adam with decoupled weight decay.

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 9e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    /// State for parameter slots of the given lengths.
    pub fn new(cfg: AdamWConfig, lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            cfg,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Advances the shared step counter. Call once per optimizer step, before
    /// updating the slots.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates slot `slot` in place. `decay` selects whether weight decay applies.
    pub fn update_slice(&mut self, slot: usize, param: &mut [f64], grad: &[f64], decay: bool) {
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let shrink = if decay { 1.0 - lr * weight_decay } else { 1.0 };
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] = param[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    pub fn update_tensor(&mut self, slot: usize, param: &Tensor, grad: &Tensor, decay: bool) -> Tensor {
        let mut values = param.to_vec();
        self.update_slice(slot, &mut values, grad.data(), decay);
        Tensor::new(param.shape(), values).expect("shape preserved")
    }
}
