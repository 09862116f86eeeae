//! Named parameter store with a stable iteration order, plus seeded
//! initializers.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};

/// Parameters registered in insertion order; the order defines optimizer
/// state alignment and checkpoint layout.
pub struct ParamStore<E> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Real> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        &self.entries[self.position(name)].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        let i = self.position(name);
        &mut self.entries[i].1
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor<E>) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<E> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Insert every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph<E>) -> Bound {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            let id = g.leaf(tensor.clone());
            index.insert(name.clone(), id);
            ids.push(id);
        }
        Bound { ids, index }
    }
}

/// Node ids of bound parameters for one graph build.
pub struct Bound {
    pub ids: Vec<NodeId>,
    index: HashMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Seeded initializers: scaled-uniform for weights, +-0.02 uniform for
/// embedding tables, zeros for biases.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<E: Real>(&mut self, rows: usize, cols: usize, limit: f64) -> Tensor<E> {
        let data = (0..rows * cols)
            .map(|_| E::from_f64(self.rng.gen_range(-limit..limit)))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// +-sqrt(6 / (fan_in + fan_out)) for a weight used as x @ w.
    pub fn linear<E: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<E> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in, fan_out, limit)
    }

    pub fn embedding<E: Real>(&mut self, rows: usize, cols: usize) -> Tensor<E> {
        self.uniform(rows, cols, 0.02)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_order_is_stable() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.insert("b", Tensor::zeros(1, 2));
        s.insert("a", Tensor::zeros(1, 3));
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(s.position("a"), 1);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Tensor<f32> = Init::new(9).linear(8, 4);
        let b: Tensor<f32> = Init::new(9).linear(8, 4);
        assert_eq!(a, b);
        let limit = (6.0 / 12.0f64).sqrt() as f32;
        assert!(a.data.iter().all(|v| v.abs() <= limit));
    }
}
