// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::params::ModelParameters;
use crate::real::Real;

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<S>>,
    second: BTreeMap<String, Vec<S>>,
}

impl<S: Real> AdamState<S> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[S]> {
        self.first.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every trainable parameter, followed by
/// clearing the gradients.
pub fn adam_step<S: Real>(params: &mut ModelParameters<S>, state: &mut AdamState<S>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(AutodiffError::MissingGradient(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let c1 = S::of(1.0 - state.beta1.powi(t));
    let c2 = S::of(1.0 - state.beta2.powi(t));
    let lr = S::of(state.learning_rate);
    let eps = S::of(state.eps);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let n = grad.len();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
        if m.len() != n {
            return Err(AutodiffError::ParameterShape {
                name: name.clone(),
                expected: vec![m.len()],
                found: vec![n],
            });
        }
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (S::one() - b1) * g;
            *vi = b2 * *vi + (S::one() - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.zero_grad();
    Ok(())
}
