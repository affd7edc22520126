use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero gives plain Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables it.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::adamw(lr, 0.0)
    }

    pub fn with_clip(self, clip_norm: f64) -> Self {
        Self { clip_norm, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| {
            let s = store.value(id).shape;
            Tensor::zeros(s[0], s[1])
        }).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let c = self.config;
        self.t += 1;
        let scale = if c.clip_norm > 0.0 {
            let n = store.grad_norm();
            if n > c.clip_norm { c.clip_norm / n } else { 1.0 }
        } else {
            1.0
        };
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = store.grad(id).data.clone();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g[k] * scale;
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / b1t;
                let vh = v.data[k] / b2t;
                w.data[k] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w.data[k]);
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add_filled("w", 1, 2, 1.0);
        store.grad_mut(ParamId(0)).data = vec![3.0, -0.5];
        let mut opt = AdamW::new(AdamConfig::adam(0.1), &store);
        opt.step(&mut store);
        let w = &store.value(ParamId(0)).data;
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] - 1.1).abs() < 1e-7);
        assert!(store.grad(ParamId(0)).data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        store.add_filled("w", 1, 1, 2.0);
        let mut opt = AdamW::new(AdamConfig::adamw(0.1, 0.5), &store);
        opt.step(&mut store);
        assert!((store.value(ParamId(0)).item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add_filled("w", 1, 1, 5.0);
        let mut opt = AdamW::new(AdamConfig::adam(0.05), &store);
        for _ in 0..2000 {
            let w = store.value(ParamId(0)).item();
            store.grad_mut(ParamId(0)).data[0] = 2.0 * (w - 1.5);
            opt.step(&mut store);
        }
        assert!((store.value(ParamId(0)).item() - 1.5).abs() < 1e-3);
    }
}
