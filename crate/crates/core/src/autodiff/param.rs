use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its gradient and Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: None,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step_count: 0,
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    entries: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn from_entries(mut entries: Vec<(ParamId, Vec<T>)>) -> Self {
        entries.sort_by_key(|(id, _)| *id);
        Self { entries }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|pos| self.entries[pos].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.entries.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self`, keeping entries sorted.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, g) in other.iter() {
            match self.entries.binary_search_by_key(&id, |(i, _)| *i) {
                Ok(pos) => {
                    for (a, b) in self.entries[pos].1.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
                Err(pos) => self.entries.insert(pos, (id, g.to_vec())),
            }
        }
    }
}

/// Owns every parameter of a model; names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(contract(format!("parameter name `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds a backward pass's gradients into the stored `grad` fields.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
                None => p.grad = Some(g.to_vec()),
            }
        }
    }
}
