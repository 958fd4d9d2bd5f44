//! Named parameter tensors with matching gradient accumulators.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;

struct Entry<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Map of name -> parameter tensor plus a same-shaped gradient accumulator.
/// Iteration order is lexicographic by name, which fixes checkpoint layout
/// and optimizer traversal order.
pub struct ParameterStore<T: Scalar> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let shape = value.shape().to_vec();
        let prev = self.entries.insert(name.to_string(), Entry { value, grad: Tensor::zeros(&shape) });
        assert!(prev.is_none(), "duplicate parameter name {}", name);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {}", name)).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {}", name)).value
    }

    pub fn grad(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {}", name)).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {}", name)).grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(T::zero());
        }
    }

    /// Scale every gradient in place (minibatch averaging, clip rescale).
    pub fn scale_grads(&mut self, s: T) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g = *g * s;
            }
        }
    }

    /// Global L2 norm of all gradients, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for e in self.entries.values() {
            for &g in e.grad.data() {
                let gw = g.wide();
                acc += gw * gw;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.is_finite())
    }

    /// Precision conversion (f32 training store -> f64 verification store
    /// and back).
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.map(|v| U::of(v.wide())));
        }
        out
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Xavier-uniform initialization: U(+-sqrt(6 / (fan_in + fan_out))).
pub fn xavier_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v = T::of(rng.gen_range(-bound..bound));
    }
    t
}

pub fn uniform_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::of(rng.gen_range(-bound..bound));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn grads_match_parameter_shapes() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[3, 4]));
        store.insert("b", Tensor::zeros(&[4]));
        assert_eq!(store.grad("w").shape(), &[3, 4]);
        assert_eq!(store.grad("b").shape(), &[4]);
        assert_eq!(store.total_elements(), 16);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[1]));
        store.insert("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn xavier_bound_respected() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let t: Tensor<f64> = xavier_uniform(&mut rng, 8, 8);
        let bound = (6.0 / 16.0f64).sqrt();
        for &v in t.data() {
            assert!(v.abs() <= bound);
        }
    }
}
