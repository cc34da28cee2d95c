//! Named parameter tables shared by the denoiser, the prompt scorer and the
//! evaluation networks.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gaussian, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors with a per-entry trainable flag.
/// Insertion order is the canonical serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            self.trainable[i] = trainable;
            return ParamId(i);
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(trainable);
        ParamId(id)
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn insert_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let t = gaussian(rng, shape)
            .expect("valid parameter shape")
            .scale(1.0 / (fan_in as f64).sqrt());
        self.insert(name, t, true)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, value), true)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Index(format!("unknown parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }

    /// Number of scalar entries in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for entries that
/// received no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient value at a flat coordinate, zero when absent.
    pub fn value(&self, id: ParamId, offset: usize) -> f64 {
        self.get(id).map_or(0.0, |g| g.data()[offset])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += s * other`, in parameter order.
    pub fn accumulate(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.axpy(s, b),
                    None => *a = Some(b.scale(s)),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}
