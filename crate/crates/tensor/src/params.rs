use std::ops::Index;

use crate::element::Element;
use crate::error::{arg_err, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return arg_err("ParamStore::add", format!("duplicate parameter `{name}`"));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<E>> {
        self.tensors.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<E>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Copies gradients from a backward pass; unreached parameters get zeros.
    pub fn store_grads(&mut self, grads: &mut Gradients<E>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let g = grads.take(v).unwrap_or_else(|| vec![E::zero(); t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Replaces tensors by name; every name must exist with an identical shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<E>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return arg_err(
                "ParamStore::load_named",
                format!("expected {} tensors, got {}", self.tensors.len(), named.len()),
            );
        }
        for (name, tensor) in named {
            let Some(id) = self.id(&name) else {
                return arg_err("ParamStore::load_named", format!("unknown parameter `{name}`"));
            };
            if self.tensors[id.0].shape() != tensor.shape() {
                return arg_err(
                    "ParamStore::load_named",
                    format!(
                        "`{name}` has shape {:?}, checkpoint {:?}",
                        self.tensors[id.0].shape(),
                        tensor.shape()
                    ),
                );
            }
            self.tensors[id.0] = tensor;
        }
        Ok(())
    }
}
