//! Named parameters and parameter sets.

use crate::nn::tensor::{Elem, Tensor};
use std::collections::BTreeMap;

/// A named weight tensor with its gradient accumulator and heavy-ball
/// momentum buffer. Non-trainable parameters also carry state such as
/// batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Parameter<E> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub momentum: Tensor<E>,
    pub trainable: bool,
}

impl<E: Elem> Parameter<E> {
    pub fn new(value: Tensor<E>, trainable: bool) -> Parameter<E> {
        let shape = value.shape();
        Parameter {
            value,
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = E::zero();
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<E>) {
        debug_assert_eq!(g.shape(), self.value.shape());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a = *a + *b;
        }
    }
}

/// Ordered collection of parameters; BTreeMap keeps every iteration (and
/// therefore serialization and optimizer order) deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<E> {
    map: BTreeMap<String, Parameter<E>>,
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> ParamSet<E> {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Parameter<E>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), p).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Parameter<E> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Parameter<E>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter<E> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter<E>> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<E>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<E>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    /// Total element count across trainable parameters only.
    pub fn trainable_element_count(&self) -> usize {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.map.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Bit-exact snapshot of all values, for frozen-parameter assertions.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<E>> {
        self.map
            .iter()
            .map(|(k, p)| (k.clone(), p.value.data().to_vec()))
            .collect()
    }

    /// True when every value is bit-identical to the snapshot.
    pub fn matches_snapshot(&self, snap: &BTreeMap<String, Vec<E>>) -> bool {
        if snap.len() != self.map.len() {
            return false;
        }
        self.map.iter().all(|(k, p)| {
            snap.get(k)
                .map(|v| {
                    v.len() == p.value.numel()
                        && v.iter().zip(p.value.data()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
                })
                .unwrap_or(false)
        })
    }
}
