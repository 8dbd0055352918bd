//! Named parameter store shared by all trainable models.
//!
//! Parameters keep insertion order so that tape binding, Adam updates, and
//! checkpoint serialization are all deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::tensor::{Gradients, NodeId, Tape, Tensor};

struct Entry {
    name: String,
    tensor: Tensor,
    adam: AdamState,
    trainable: bool,
}

/// Ordered collection of named parameter tensors with optimizer state.
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// Tape handles for one forward pass, aligned with store order.
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    pub fn id(&self, store: &ParamStore, name: &str) -> NodeId {
        self.ids[store.index[name]]
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        let len = tensor.numel();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            adam: AdamState::new(len),
            trainable: true,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if self.entries[i].tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}': shape {:?} replaced by {:?}",
                self.entries[i].tensor.shape(),
                tensor.shape()
            )));
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    /// Mark parameters whose name starts with `prefix` as frozen; frozen
    /// parameters still enter the graph but never receive updates.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert every parameter into the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            ids: self
                .entries
                .iter()
                .map(|e| tape.param(e.tensor.clone()))
                .collect(),
        }
    }

    /// Adam-update every trainable parameter that received a gradient.
    pub fn apply_grads(
        &mut self,
        binding: &Binding,
        grads: &Gradients,
        hyper: &AdamHyper,
    ) -> Result<()> {
        for (entry, &id) in self.entries.iter_mut().zip(&binding.ids) {
            if !entry.trainable {
                continue;
            }
            if let Some(g) = grads.get(id) {
                adam_step(entry.tensor.data_mut(), g.data(), &mut entry.adam, hyper)?;
            }
        }
        Ok(())
    }

    /// Copy of all parameter tensors, for best-epoch tracking.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Tensor]) -> Result<()> {
        if snap.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, store has {}",
                snap.len(),
                self.entries.len()
            )));
        }
        for (e, t) in self.entries.iter_mut().zip(snap) {
            e.tensor = t.clone();
        }
        Ok(())
    }
}

/// Fresh tensor with entries i.i.d. uniform on `(-bound, +bound)`.
pub fn uniform_init(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data length match by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insertion_order_is_stable() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::vector(vec![1.0])).unwrap();
        store.add("a", Tensor::vector(vec![2.0])).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(store.add("w", Tensor::vector(vec![2.0])).is_err());
    }

    #[test]
    fn frozen_params_do_not_update() {
        let mut store = ParamStore::new();
        store.add("tok.w", Tensor::vector(vec![1.0])).unwrap();
        store.add("head.w", Tensor::vector(vec![1.0])).unwrap();
        store.freeze_prefix("tok.");

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let a = binding.id(&store, "tok.w");
        let b = binding.id(&store, "head.w");
        let s = tape.mul(a, b).unwrap();
        let loss = tape.sum_axis(s, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        store
            .apply_grads(&binding, &grads, &AdamHyper::with_lr(0.1))
            .unwrap();
        assert_eq!(store.get("tok.w").unwrap().data(), &[1.0]);
        assert!(store.get("head.w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn uniform_init_is_seed_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = uniform_init(vec![4, 5], 0.25, &mut r1);
        let b = uniform_init(vec![4, 5], 0.25, &mut r2);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() < 0.25));
    }
}
