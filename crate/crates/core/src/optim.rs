//! SGD with momentum and Adam, stepping leaf tensors in place.
//!
//! Weight decay is the coupled L2 form (added to the gradient before the
//! update), matching the convention of the training loops that use these.

use std::collections::HashMap;

use crate::tensor::Tensor;

pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<u64, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// One update over the given parameters; tensors without an accumulated
    /// gradient are skipped.
    pub fn step(&mut self, params: &[Tensor]) {
        for p in params {
            let Some(grad) = p.grad() else { continue };
            let v = self
                .velocity
                .entry(p.id())
                .or_insert_with(|| vec![0.0; grad.len()]);
            p.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i] + self.weight_decay * data[i];
                    v[i] = self.momentum * v[i] + g;
                    data[i] -= self.lr * v[i];
                }
            });
        }
    }
}

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
    m: HashMap<u64, Vec<f32>>,
    v: HashMap<u64, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, betas: (f32, f32), weight_decay: f32) -> Adam {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            let Some(grad) = p.grad() else { continue };
            let m = self.m.entry(p.id()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(p.id()).or_insert_with(|| vec![0.0; grad.len()]);
            p.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i] + self.weight_decay * data[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            });
        }
    }
}
