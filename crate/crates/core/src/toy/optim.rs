//! AdamW with decoupled weight decay and global-norm clipping.

use crate::backend::StepSettings;

use super::model::Slot;

pub fn global_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Factor applied to the gradient so its global norm does not exceed `clip`.
pub fn clip_coefficient(norm: f64, clip: f64) -> f64 {
    if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.t = 0;
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    /// Clips `grad` in place, updates `params` and returns the pre-clip norm.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64], slots: &[Slot], settings: &StepSettings) -> f64 {
        let norm = global_norm(grad);
        let c = clip_coefficient(norm, settings.clip_norm);
        if c != 1.0 {
            grad.iter_mut().for_each(|g| *g *= c);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for slot in slots {
            let lr = settings.lr_by_group.get(&slot.group).copied().unwrap_or(0.0);
            let decay = if slot.decay { settings.weight_decay } else { 0.0 };
            for i in slot.range() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
                params[i] -= lr * (update + decay * params[i]);
            }
        }
        norm
    }
}
