use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Ownership group, e.g. `"action"` or `"physical:tactile"`.
    pub group: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Ordered collection of parameters. Order is insertion order and is the
/// order used in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, created by [`ParamStore::bind`].
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group: group.into(), value, grad: None, requires_grad: true });
        Ok(())
    }

    /// Replaces the value of an existing parameter (shapes must agree).
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Invalid(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Distinct groups in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    /// Places every parameter on `graph` as a leaf. Frozen parameters become
    /// constants, so no gradient is accumulated for them.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), p.requires_grad))
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Like [`ParamStore::bind`] but the leaves borrow the stored values, so
    /// nothing is copied. The store stays frozen while `graph` lives.
    pub fn bind_ref<'a>(&'a self, graph: &mut Graph<'a>) -> Bound {
        let vars = self.params.iter().map(|p| graph.leaf_ref(&p.value, p.requires_grad)).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Copies gradients of trainable parameters out of `graph` after `backward`.
    /// Parameters the loss does not depend on receive an all-zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.requires_grad {
                p.grad = None;
                continue;
            }
            let data = match graph.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            };
            p.grad = Some(Tensor::new(p.value.shape().to_vec(), data).expect("grad shape"));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
