//! Adaptive-moment optimizer with decoupled weight decay.

use crate::autograd::{GradStore, ParamStore};
use crate::math::Matrix;

/// AdamW: first/second moment estimates with bias correction, weight decay
/// applied directly to the parameters rather than through the gradient.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step_count: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, t)| Matrix::zeros(t.rows, t.cols))
            .collect();
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for idx in 0..params.len() {
            let id = crate::autograd::ParamId(idx);
            let g = grads.get(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = params.get_mut(id);
            for i in 0..w.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                w.data[i] -=
                    self.learning_rate * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w.data[i]);
            }
        }
    }
}
