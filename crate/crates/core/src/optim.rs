//! Optimizers over flat parameter buffers with per-range learning rates.
//!
//! A step receives a list of `(range, lr)` groups; indices outside every
//! group are neither read nor written, so a sub-network can be removed from
//! the optimized set without touching its weights.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam moments with decoupled weight decay.
    Adaptive,
    /// Heavy-ball SGD.
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumConfig {
    pub momentum: f64,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self { momentum: 0.9 }
    }
}

pub type LrGroups = [(Range<usize>, f64)];

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// `theta *= 1 - lr*wd; theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], groups: &LrGroups) {
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (range, lr) in groups {
            for i in range.clone() {
                let g = grads[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] *= 1.0 - lr * weight_decay;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentumSgd {
    cfg: MomentumConfig,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(cfg: MomentumConfig, len: usize) -> Self {
        Self {
            cfg,
            velocity: vec![0.0; len],
        }
    }

    /// `b = mu * b + g; theta -= lr * b`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], groups: &LrGroups) {
        let mu = self.cfg.momentum;
        for (range, lr) in groups {
            for i in range.clone() {
                self.velocity[i] = mu * self.velocity[i] + grads[i];
                params[i] -= lr * self.velocity[i];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adaptive(AdamW),
    Momentum(MomentumSgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, adamw: AdamWConfig, momentum: MomentumConfig, len: usize) -> Self {
        match kind {
            OptimizerKind::Adaptive => Optimizer::Adaptive(AdamW::new(adamw, len)),
            OptimizerKind::Momentum => Optimizer::Momentum(MomentumSgd::new(momentum, len)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], groups: &LrGroups) {
        match self {
            Optimizer::Adaptive(o) => o.step(params, grads, groups),
            Optimizer::Momentum(o) => o.step(params, grads, groups),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // f(x) = 0.5 * (3 x0^2 + x1^2) + x0 x1
    fn grad(x: &[f64]) -> Vec<f64> {
        vec![3.0 * x[0] + x[1], x[1] + x[0]]
    }

    fn f(x: &[f64]) -> f64 {
        0.5 * (3.0 * x[0] * x[0] + x[1] * x[1]) + x[0] * x[1]
    }

    #[test]
    fn both_optimizers_descend_the_bowl() {
        let all = [(0..2, 0.05)];
        let mut x = vec![2.0, -3.0];
        let mut sgd = MomentumSgd::new(MomentumConfig::default(), 2);
        for _ in 0..500 {
            let g = grad(&x);
            sgd.step(&mut x, &g, &all);
        }
        assert!(f(&x) < 1e-10);

        let mut x = vec![2.0, -3.0];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut adam = AdamW::new(cfg, 2);
        for _ in 0..3000 {
            let g = grad(&x);
            adam.step(&mut x, &g, &all);
        }
        assert!(f(&x) < 1e-6);
    }

    #[test]
    fn zero_lr_group_is_untouched() {
        let mut x = vec![1.5, -0.5, 2.0];
        let g = vec![0.3, 0.3, 0.3];
        let groups = [(0..1, 0.1), (1..3, 0.0)];
        let mut adam = AdamW::new(AdamWConfig::default(), 3);
        adam.step(&mut x, &g, &groups);
        assert_eq!(&x[1..], &[-0.5, 2.0]);
        assert_ne!(x[0], 1.5);
        let mut sgd = MomentumSgd::new(MomentumConfig::default(), 3);
        sgd.step(&mut x, &g, &groups);
        assert_eq!(&x[1..], &[-0.5, 2.0]);
    }

    #[test]
    fn indices_outside_groups_are_ignored() {
        let mut x = vec![1.0, 1.0];
        let g = vec![f64::NAN, 1.0];
        let mut adam = AdamW::new(AdamWConfig::default(), 2);
        adam.step(&mut x, &g, &[(1..2, 0.1)]);
        assert_eq!(x[0], 1.0);
    }
}
