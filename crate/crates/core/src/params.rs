//! Named parameter storage and per-pass binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Prng, Scalar, Tape, Tensor, Var};

/// Ordered map from parameter name to value. Iteration order is the sorted
/// name order, which fixes the order of every downstream reduction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| self.missing(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        if !self.tensors.contains_key(name) {
            return Err(self.missing(name));
        }
        Ok(self.tensors.get_mut(name).expect("checked above"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn missing(&self, name: &str) -> Error {
        Error::MissingTensor {
            name: name.to_string(),
            available: self.tensors.keys().cloned().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (k, v) in other.iter() {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Creates a variable for every parameter on `tape`.
    /// Trainable parameters become differentiable leaves, others constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.leaf(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Parameters bound to a tape for one pass.
pub struct Bound<T> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
            available: self.vars.keys().cloned().collect(),
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        self.vars.iter()
    }

    /// Gradient for every bound parameter (zeros where unused).
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
                .collect(),
        }
    }
}

/// Shared initialisation helpers.
pub(crate) mod init {
    use super::*;

    /// Normal weights with standard deviation `gain / sqrt(fan_in)`.
    pub fn fan_in_normal<T: Scalar>(shape: &[usize], gain: f64, rng: &mut Prng) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng)
    }
}
