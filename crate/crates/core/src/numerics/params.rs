//! Named learnable arrays with gradient buffers.

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a registered parameter. Indices are stable for the life of the
/// owning [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F: Element> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Flat registry of model parameters. Names are unique and become the
/// checkpoint keys; gradients accumulate across backward calls until
/// [`ParamSet::zero_grads`] resets them.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F: Element> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Element> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry { name: name.clone(), value, grad });
        self.by_name.insert(name, id);
        Ok(id)
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].grad
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[F]) {
        let g = self.entries[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for e in &self.entries {
            for g in e.grad.data() {
                let v = g.into_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn cast<G: Element>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.register(e.name.clone(), e.value.cast::<G>())
                .expect("names unique by construction");
        }
        out
    }
}
