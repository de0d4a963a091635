use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Role of a stored tensor. Only `Weight` entries take part in L2
/// regularization; `Buffer` entries are never trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

/// Named tensors of a model, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, (ParamKind, Tensor<T>)>,
}

/// Graph variables for the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, (kind, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|(_, t)| t)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(k, _)| *k)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|(_, t)| t.len()).sum()
    }

    /// Adds every trainable tensor to `g` as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        let vars = self
            .entries
            .iter()
            .filter(|(_, (k, _))| k.trainable())
            .map(|(n, (_, t))| (n.clone(), g.param(t.clone())))
            .collect();
        Binding { vars }
    }

    /// Copies values from `other` for every matching name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, (_, t)) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing from source")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: {:?} vs {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Uniform samples on `[-limit, limit]`.
pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(if limit > 0.0 { rng.gen_range(-limit..=limit) } else { 0.0 }))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Glorot/Xavier uniform initialization.
pub fn glorot<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    uniform(rng, shape, limit)
}
