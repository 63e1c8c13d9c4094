use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{AeroError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named trainable tensors in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor: tensor.with_requires_grad(true), decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.tensor.clone())).collect())
    }

    /// Binds every parameter as a constant (no gradients recorded).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect())
    }

    /// Copies gradients from the tape into each tensor's gradient slot;
    /// parameters the loss does not reach get zeros.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.params.len() {
            return Err(AeroError::Internal("bound handles do not match the parameter store".into()));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| AeroError::Index(format!("no parameter named {name}")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(AeroError::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor.with_requires_grad(true);
        Ok(())
    }
}
