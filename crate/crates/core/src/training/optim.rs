//! Optimizers and gradient utilities for the training loop.

use crate::numerics::{Element, ParamSet};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdaptiveMoment,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Per-parameter optimizer state. Weight decay is decoupled (applied to the
/// weights directly, not folded into the moments).
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new<F: Element>(kind: OptimizerKind, params: &ParamSet<F>) -> Self {
        let sizes: Vec<usize> = params.entries().iter().map(|e| e.value.numel()).collect();
        Optimizer {
            kind,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: match kind {
                OptimizerKind::AdaptiveMoment => sizes.iter().map(|&s| vec![0.0; s]).collect(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn step<F: Element>(&mut self, params: &mut ParamSet<F>, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grads: Vec<f64> = params.grad(id).data().iter().map(|g| g.into_f64()).collect();
            match self.kind {
                OptimizerKind::AdaptiveMoment => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let w = params.value_mut(id).data_mut();
                    for j in 0..grads.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grads[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grads[j] * grads[j];
                        let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                        let decayed = update + weight_decay * w[j].into_f64();
                        w[j] = F::from_f64(w[j].into_f64() - lr * decayed);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let m = &mut self.m[i];
                    let w = params.value_mut(id).data_mut();
                    for j in 0..grads.len() {
                        m[j] = SGD_MOMENTUM * m[j] + grads[j];
                        let decayed = m[j] + weight_decay * w[j].into_f64();
                        w[j] = F::from_f64(w[j].into_f64() - lr * decayed);
                    }
                }
            }
        }
    }
}

/// Rescale all gradients so the global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm<F: Element>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            for g in params.grad_mut(id).data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Cosine decay to zero over the full training run.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
