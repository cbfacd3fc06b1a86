//! Adam optimizer with persistent moment buffers.

use std::collections::BTreeMap;

use super::{Parameters, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments keyed by parameter name.
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// Applies one update with learning rate `lr` to every trainable
    /// parameter, then clears the gradients.
    pub fn step<M: Parameters<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for (name, p) in model.named_params_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                p.value[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
    }
}
