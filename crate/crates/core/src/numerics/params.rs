use std::ops::Index;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Position of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered, named collection of model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every entry of a store, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    /// Registers a tensor that is saved with the model but never updated.
    pub fn add_frozen(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(self.id(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a tensor, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim("param set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Same entries converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Records every entry on `tape`: trainable ones as parameters, frozen ones as constants.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with the store; frozen entries get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, v)| match grads.get(*v) {
                Some(g) if e.trainable => g.clone(),
                _ => Tensor::zeros(e.value.shape()),
            })
            .collect()
    }
}
