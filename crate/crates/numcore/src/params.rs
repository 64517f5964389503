use std::collections::HashMap;

use crate::adam::Adam;
use crate::error::{NumError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::invalid(
                "param_store",
                format!("duplicate parameter name {name}"),
            ));
        }
        self.index.insert(name.clone(), self.names.len());
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Put every parameter on the tape; the result is indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
        let mut filled = vec![false; self.len()];
        for (name, t) in entries {
            let Some(&i) = self.index.get(name) else {
                continue;
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "load_params",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t.clone();
            filled[i] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(NumError::Checkpoint(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// One optimizer update using the gradients of `vars` (as returned by
    /// [`ParamStore::bind`]); parameters without a gradient see a zero one.
    pub fn apply_adam(&mut self, opt: &mut Adam<T>, grads: &Gradients<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.len() {
            return Err(NumError::shape("apply_adam", &[self.len()], &[vars.len()]));
        }
        let zeros: Vec<Option<Tensor<T>>> = vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| match grads.get(*v) {
                Some(_) => None,
                None => Some(Tensor::zeros(t.shape())),
            })
            .collect();
        let grad_refs: Vec<&Tensor<T>> = vars
            .iter()
            .zip(&zeros)
            .map(|(v, z)| grads.get(*v).unwrap_or_else(|| z.as_ref().unwrap()))
            .collect();
        let mut param_refs: Vec<&mut Tensor<T>> = self.tensors.iter_mut().collect();
        opt.step(&mut param_refs, &grad_refs)
    }
}
