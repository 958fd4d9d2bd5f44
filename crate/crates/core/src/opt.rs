//! Adam optimizer with global gradient-norm clipping.

use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub struct Adam<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Clip the global gradient norm, then apply one Adam step at `lr`.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParameterStore<T>, lr: f64, max_grad_norm: f64) -> f64 {
        let norm = store.grad_norm();
        if max_grad_norm > 0.0 && norm > max_grad_norm {
            store.scale_grads(T::of(max_grad_norm / norm));
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let g = store.grad(&name).clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(&name);
            let (b1t, b2t) = (T::of(b1), T::of(b2));
            let one = T::one();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1t * m.data()[i] + (one - b1t) * gi;
                let vi = b2t * v.data()[i] + (one - b2t) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi.wide() / bc1;
                let vhat = vi.wide() / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                p.data_mut()[i] = p.data_mut()[i] - T::of(upd);
            }
        }
        norm
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(x) = (x - 3)^2 starting from 0.
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::from_vec(&[1], vec![0.0]));
        let mut adam = Adam::new();
        for _ in 0..2000 {
            store.zero_grads();
            let x = store.get("x").data()[0];
            store.grad_mut("x").data_mut()[0] = 2.0 * (x - 3.0);
            adam.step(&mut store, 1e-2, 0.0);
        }
        assert!((store.get("x").data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_limits_global_norm() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("a", Tensor::from_vec(&[2], vec![0.0, 0.0]));
        store.grad_mut("a").data_mut().copy_from_slice(&[3.0, 4.0]);
        let mut adam = Adam::new();
        let norm = adam.step(&mut store, 0.0, 0.5);
        assert!((norm - 5.0).abs() < 1e-12);
    }
}
