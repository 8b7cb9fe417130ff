use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the normal initializer for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors, keyed by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Marks every tensor trainable or not according to `pred(name)`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            t.set_requires_grad(pred(name));
        }
    }

    /// Registers every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        Bindings { vars }
    }

    /// Pulls gradients for every bound tensor out of a swept tape.
    pub fn absorb_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(&v) = bindings.vars.get(name) {
                tape.accumulate_into(v, t);
            }
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| invalid(format!("parameter {name} is not bound")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Deterministic initializers used while building a model.
pub(crate) struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches data").with_grad()
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::zeros(shape).with_grad()
    }

    pub fn ones(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::full(shape, 1.0).with_grad()
    }
}
