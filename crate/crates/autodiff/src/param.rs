use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
    has_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn has_grad(&self) -> bool {
        self.has_grad
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of parameters belonging to one model.
///
/// Every store carries a process-unique id so that gradients produced by a
/// graph touching several stores land in the right one.
#[derive(Debug)]
pub struct ParamStore<T: Scalar> {
    id: u64,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(tensor.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            grad,
            has_grad: false,
        });
        ParamId(self.params.len() - 1)
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

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            p.has_grad = false;
        }
    }

    /// Adds the gradients computed by a backward pass into this store.
    ///
    /// Entries belonging to other stores are ignored.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for entry in grads.entries.iter().filter(|e| e.store == self.id) {
            let p = &mut self.params[entry.index];
            p.grad.add_assign(&entry.grad);
            p.has_grad = true;
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Replaces every parameter value with the tensor of the same name.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for p in &mut self.params {
            let (_, t) = values.iter().find(|(n, _)| *n == p.name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name))
            })?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    /// Copy of this store with every value converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.tensor.cast());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GradEntry<T> {
    pub store: u64,
    pub index: usize,
    pub grad: Tensor<T>,
}

/// Parameter gradients produced by [`Graph::backward`](crate::Graph::backward).
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) entries: Vec<GradEntry<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter, summed over every place it was bound in the graph.
    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for e in self
            .entries
            .iter()
            .filter(|e| e.store == store.id() && e.index == id.0)
        {
            match &mut acc {
                Some(a) => a.add_assign(&e.grad),
                None => acc = Some(e.grad.clone()),
            }
        }
        acc
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
