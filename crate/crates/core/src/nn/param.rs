use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Real;

/// Learnable tensor with its gradient, momentum buffer, and learning-rate multiplier.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum_buf: Tensor<T>,
    /// 0 freezes the parameter: updates leave value and momentum untouched.
    pub lr_mult: f32,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            momentum_buf: Tensor::zeros(&shape),
            value,
            lr_mult: 1.0,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.lr_mult == 0.0
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameters. Layers reference parameters by
/// [`ParamId`], so two layers may share one parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {}",
                param.name
            )));
        }
        let id = ParamId(self.params.len());
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds a sample-local gradient buffer into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads<T>) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Re-draws every parameter under `prefix` from a zero-mean Gaussian.
    /// Weights use `std`, or `sqrt(2 / fan_in)` when `std` is `None`; biases are zeroed.
    pub fn reinit_gaussian<R: Rng>(
        &mut self,
        prefix: &str,
        std: Option<f64>,
        rng: &mut R,
    ) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            if p.name.ends_with(".bias") {
                p.value.fill(T::zero());
            } else {
                let fan_in: usize = p.value.shape()[1..].iter().product();
                let sd = std.unwrap_or_else(|| (2.0 / fan_in.max(1) as f64).sqrt());
                let normal = Normal::new(0.0, sd).expect("finite std");
                for v in p.value.data_mut() {
                    *v = T::lit(normal.sample(rng));
                }
            }
            p.momentum_buf.fill(T::zero());
            p.grad.fill(T::zero());
        }
    }
}

/// Sparse per-sample gradient buffer indexed like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(len: usize) -> Self {
        Grads {
            slots: vec![None; len],
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    /// Folds `other` into `self` slot by slot.
    pub fn merge(&mut self, other: &Grads<T>) -> Result<()> {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g)?;
            }
        }
        Ok(())
    }
}
