use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{contract, Error, Result};

/// Named parameter tensors in registration order.
///
/// Values sit behind `Arc` so binding them into a graph is free; an update
/// after the graph is dropped mutates in place.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        self.entries.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(contract(format!(
                "parameter {name}: shape {:?} cannot be replaced by {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Places every parameter on `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.param_shared(Arc::clone(v))))
                .collect(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, va), (kb, vb))| {
                ka == kb
                    && va.shape() == vb.shape()
                    && va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
            })
    }

    // Initialisers ---------------------------------------------------------

    pub fn register_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.register(name, t)
    }

    /// Glorot-uniform weight for a `[fan_in, fan_out]` matrix.
    pub fn register_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng)));
        self.register(name, t)
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn register_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.register(name, Tensor::filled(shape, T::one()))
    }
}

/// Parameter name → graph variable for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binds names to variables already on a graph.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract(format!("parameter {name} is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient tensors aligned with `store`; parameters the loss did not
    /// touch get zeros.
    pub fn collect_grads<T: Real>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> ParamGrads<T> {
        let tensors = store
            .iter()
            .map(|(name, value)| {
                let data = self
                    .vars
                    .get(name)
                    .and_then(|&v| grads.get(v))
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); value.len()]);
                Tensor::new(value.shape(), data).expect("gradient matches parameter shape")
            })
            .collect();
        ParamGrads { tensors }
    }
}

/// Gradients for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct ParamGrads<T: Real = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = *x * c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
