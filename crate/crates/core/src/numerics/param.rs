use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// A named learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Ordered collection of parameters. Ids are only valid for the store
/// (or clones of the store) that issued them.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        // Clones keep the id so existing handles still resolve.
        ParamStore {
            id: self.id,
            params: self.params.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            trainable,
        });
        ParamId {
            store: self.id,
            index: self.params.len() - 1,
        }
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.id, "parameter handle from a different store");
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.check(id);
        &self.params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.check(id);
        &mut self.params[id.index].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.check(id);
        let p = &mut self.params[id.index];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: p.value.shape(),
                rhs: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|index| ParamId { store: self.id, index })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId { store: self.id, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_param_trainable(&mut self, id: ParamId, trainable: bool) {
        self.check(id);
        self.params[id.index].trainable = trainable;
    }

    /// Scalar count of trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the adjoints of every trainable parameter this store bound
    /// on `tape` into `Param::grad`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for &(var, id) in tape.param_bindings() {
            if id.store != self.id {
                continue;
            }
            let p = &mut self.params[id.index];
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(var) {
                p.grad.add_assign(g);
            }
        }
    }
}
