//! Gradient-descent optimizers over named parameter tensors.

use crate::model::{Grads, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimKind {
    /// Plain stochastic gradient descent.
    Sgd,
    /// Adam with decoupled weight decay (AdamW).
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimKind::AdaptiveMoment,
            lr,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimKind::Sgd,
            lr,
            weight_decay: 0.0,
            grad_clip: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Holds per-tensor moment state keyed by tensor name. Created fresh for
/// each training or adaptation run; never shared.
#[derive(Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer { cfg, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update for every tensor present in `grads`. Clips the
    /// global gradient norm first. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut Grads) -> f64 {
        let norm = grads.global_norm();
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            grads.scale(self.cfg.grad_clip / norm);
        }
        self.steps += 1;
        let t = self.steps as f64;
        let cfg = self.cfg;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        let (m_state, v_state) = (&mut self.m, &mut self.v);
        params.visit_tensors_mut(|name, _, data| {
            let Some(g) = grads.tensors.get(name) else {
                return;
            };
            match cfg.kind {
                OptimKind::Sgd => {
                    for (p, &gi) in data.iter_mut().zip(g) {
                        *p -= cfg.lr * (gi + cfg.weight_decay * *p);
                    }
                }
                OptimKind::AdaptiveMoment => {
                    let m = m_state
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; data.len()]);
                    let v = v_state
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; data.len()]);
                    for i in 0..data.len() {
                        let gi = g[i];
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        data[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)
                            + cfg.weight_decay * data[i]);
                    }
                }
            }
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Grads, ModelConfig, ModelParams};

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            dim: 4,
            mlp_ratio: 1,
            vocab: 8,
            rope_enabled: false,
            max_context: 16,
            tied_embeddings: false,
        };
        ModelParams::init(&cfg, 0).unwrap()
    }

    #[test]
    fn updates_only_tensors_with_grads() {
        let mut p = tiny();
        let before = p.clone();
        let mut grads = Grads::default();
        grads.entry("layer0.wq", 16).iter_mut().for_each(|g| *g = 0.5);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-2));
        opt.step(&mut p, &mut grads);
        assert_ne!(p.layers[0].w_q, before.layers[0].w_q);
        assert_eq!(p.layers[0].w_k, before.layers[0].w_k);
        assert_eq!(p.embed, before.embed);
        assert_eq!(p.unembed, before.unembed);
    }

    #[test]
    fn clip_bounds_applied_norm() {
        let mut p = tiny();
        let mut grads = Grads::default();
        grads.entry("layer0.wq", 16).iter_mut().for_each(|g| *g = 100.0);
        let mut cfg = OptimizerConfig::sgd(1.0);
        cfg.grad_clip = 1.0;
        let mut opt = Optimizer::new(cfg);
        let before = p.layers[0].w_q.clone();
        let norm = opt.step(&mut p, &mut grads);
        assert!(norm > 1.0);
        // Post-clip update has norm <= lr * clip.
        let mut delta = 0.0;
        for (a, b) in p.layers[0].w_q.data().iter().zip(before.data()) {
            delta += (a - b) * (a - b);
        }
        assert!(delta.sqrt() <= 1.0 + 1e-9);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = tiny();
        let w0 = p.layers[0].w_q.data()[0];
        let mut grads = Grads::default();
        grads.entry("layer0.wq", 16)[0] = 2.0;
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut p, &mut grads);
        assert!((p.layers[0].w_q.data()[0] - (w0 - 0.2)).abs() < 1e-12);
    }
}
