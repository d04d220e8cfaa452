use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named tensors of a model, in registration order. Normalization running
/// statistics live here as non-trainable entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        match self.entries.get(name) {
            Some(p) => &p.value,
            None => panic!("parameter {name} not registered"),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        match self.entries.get_mut(name) {
            Some(p) => &mut p.value,
            None => panic!("parameter {name} not registered"),
        }
    }

    /// Two disjoint mutable borrows, for running mean and variance.
    pub fn pair_mut(&mut self, a: &str, b: &str) -> (&mut Tensor, &mut Tensor) {
        let ia = self.entries.get_index_of(a).unwrap_or_else(|| panic!("parameter {a} not registered"));
        let ib = self.entries.get_index_of(b).unwrap_or_else(|| panic!("parameter {b} not registered"));
        assert_ne!(ia, ib);
        let [pa, pb] = self
            .entries
            .get_disjoint_indices_mut([ia, ib])
            .expect("distinct indices");
        (&mut pa.1.value, &mut pb.1.value)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}
