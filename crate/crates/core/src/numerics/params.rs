use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter. Everything except `Base` and `Decoder` belongs to the
/// encoder's trainable subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Adapter,
    Alignment,
    EdgeMlp,
    DistanceTable,
    GraphPos,
    Decoder,
}

impl ParamGroup {
    pub fn in_trainable_subset(self) -> bool {
        !matches!(self, ParamGroup::Base | ParamGroup::Decoder)
    }

    /// Position-related groups take the larger learning rate.
    pub fn is_position_group(self) -> bool {
        matches!(self, ParamGroup::DistanceTable | ParamGroup::GraphPos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` until something is accumulated.
    pub grad: Option<Tensor<T>>,
    pub group: ParamGroup,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None, group, requires_grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].requires_grad = on;
    }

    /// Freeze every parameter in the store.
    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.requires_grad = false;
            p.grad = None;
        }
    }

    pub fn count_elements(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.len()).sum()
    }

    /// Adds `grads` into the grad slots.
    pub fn accumulate(&mut self, grads: &GradSet<T>) -> Result<()> {
        for (&id, g) in &grads.grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(slot) => slot.add_assign(g)?,
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Clears every grad slot.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Invalid("parameter stores differ in layout".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Invalid(format!("parameter {} does not match {}", a.name, b.name)));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Bitwise snapshot of all values, for frozenness checks.
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T> {
    pub(crate) grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Default for GradSet<T> {
    fn default() -> Self {
        Self { grads: BTreeMap::new() }
    }
}

impl<T: Real> GradSet<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn add(&mut self, other: &GradSet<T>) -> Result<()> {
        for (&id, g) in &other.grads {
            match self.grads.get_mut(&id) {
                Some(slot) => slot.add_assign(g)?,
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
        Ok(())
    }
}
