use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Stable index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter tensors.
///
/// A parameter is trainable iff its tensor has `requires_grad` set; frozen
/// parameters are bound onto tapes as constants and never get a gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::contract("param_store", format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].set_requires_grad(trainable);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad()).collect()
    }

    /// Total scalar count over the given parameters.
    pub fn element_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).numel()).sum()
    }

    /// Add the gradients a tape computed for bound parameters into their
    /// grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, var) in tape.bound_params() {
            let (Some(g), Some(dst)) = (tape.grad(var), self.tensors[id.0].grad_mut()) else { continue };
            dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Mutable access to several distinct parameters at once, in `ids` order.
    pub fn many_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut slots: Vec<Option<&mut Tensor>> = self.tensors.iter_mut().map(Some).collect();
        ids.iter()
            .map(|id| slots[id.0].take().expect("parameter ids must be distinct"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros([2])).unwrap();
        assert!(store.add("w", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn shared_binding_accumulates_into_one_slot() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape);
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones([3])).unwrap();
        store.set_trainable(id, false);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let x = tape.leaf(Tensor::ones([3]).with_grad());
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape);
        assert!(store.get(id).grad().is_none());
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }
}
