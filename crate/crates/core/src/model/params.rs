//! Named parameter storage.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    meta: Vec<ParamMeta>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.meta.push(ParamMeta { name, decay });
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamMeta, &Tensor<T>)> {
        self.meta.iter().zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(
                "set parameter",
                self.values[id.0].shape(),
                value.shape(),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter on `tape`, as gradient leaves if `train`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, grad: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| {
                    if grad {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    }
                })
                .collect(),
        }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            meta: self.meta.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters recorded on one tape.
#[derive(Clone)]
pub struct Bound<'t, T: Element> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Wraps vars given in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}
