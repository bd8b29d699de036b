use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor. Frozen parameters never allocate a gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Owns every parameter of a model in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None, trainable });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, Tensor::zeros(shape), trainable)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, Tensor::ones(shape), trainable)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng), trainable)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name).map(|id| self.get(id)).ok_or_else(|| Error::Input(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total element count of (trainable, frozen) parameters.
    pub fn count(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.value.numel(), f)
            } else {
                (t, f + p.value.numel())
            }
        })
    }

    /// Sum of element counts of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: None, trainable: p.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
