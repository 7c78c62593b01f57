use serde::{Deserialize, Serialize};

use crate::engine::{Real, Tensor};

/// Adam with decoupled weight decay. Decay applies to matrices only; vectors
/// (norm gains, biases, attention biases) are left undecayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<Real>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as Real, self.beta2 as Real);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = lr as Real;
        let eps = self.eps as Real;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() == 2 { self.weight_decay as Real } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1 as Real;
                let vhat = v[j] / c2 as Real;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
            }
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Vec<Real>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| (*g as f64) * (*g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<Real>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as Real;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
