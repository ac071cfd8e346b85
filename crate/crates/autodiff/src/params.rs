// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A named tensor. Trainable entries receive gradients and optimizer
/// updates; the rest are buffers such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub value: Tensor<S>,
    pub grad: Option<Vec<S>>,
    pub trainable: bool,
}

/// Parameters keyed by dotted path, iterated in sorted name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParameters<S> {
    entries: BTreeMap<String, Parameter<S>>,
}

impl<S: Real> ModelParameters<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.entries.insert(
            name.into(),
            Parameter {
                value,
                grad: None,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.entries.insert(
            name.into(),
            Parameter {
                value,
                grad: None,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<S>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ModelParameters<S>) {
        self.entries.extend(other.entries);
    }

    /// Replaces values of every entry in `src` that starts with `prefix`.
    /// Each must already exist here with the same shape; the first offending
    /// name is reported otherwise.
    pub fn overlay(&mut self, src: &ModelParameters<S>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, p) in src.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.value.shape() != p.value.shape() {
                return Err(AutodiffError::ParameterShape {
                    name: name.clone(),
                    expected: dst.value.shape().to_vec(),
                    found: p.value.shape().to_vec(),
                });
            }
            dst.value = p.value.clone();
            n += 1;
        }
        // every destination entry under the prefix must have been supplied
        if let Some(missing) = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .find(|k| !src.entries.contains_key(*k))
        {
            return Err(AutodiffError::UnknownParameter(missing.clone()));
        }
        Ok(n)
    }

    pub fn cast<T: Real>(&self) -> ModelParameters<T> {
        ModelParameters {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p
                                .grad
                                .as_ref()
                                .map(|g| g.iter().map(|v| T::of(v.as_f64())).collect()),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Kaiming (He) uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<S: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
