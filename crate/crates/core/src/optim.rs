//! Adaptive-moment optimizer with decoupled weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Matrix<T>>,
    pub second: Vec<Matrix<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let mut opt = Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        };
        opt.sync(store);
        opt
    }

    /// Adds zeroed moments for parameters registered after construction.
    pub fn sync(&mut self, store: &ParamStore<T>) {
        for e in &store.entries()[self.first.len()..] {
            let (r, c) = e.value.shape();
            self.first.push(Matrix::zeros(r, c));
            self.second.push(Matrix::zeros(r, c));
        }
    }

    /// One update. Parameters with `trainable[i] == false` or no gradient are untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, trainable: &[bool]) {
        self.sync(store);
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - powi(c.beta1, self.step));
        let bc2 = T::of(1.0 - powi(c.beta2, self.step));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let decay = T::of(c.lr * c.weight_decay);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !trainable.get(i).copied().unwrap_or(true) {
                continue;
            }
            let Some(g) = grads.params().get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let apply_decay = entry.decay;
            for (((p, &gi), mi), vi) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if apply_decay {
                    *p = *p - decay * *p;
                }
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn powi(base: f64, exp: u64) -> f64 {
    num_traits::Float::powi(base, exp.min(i32::MAX as u64) as i32)
}
