// SPDX-License-Identifier: Apache-2.0

//! Average-pool plus two-layer MLP classifier.

use fusepath_autodiff::{kaiming_uniform, Graph, ModelParameters, Real, Result, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_linear, linear, Forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Filled from the manifest when zero.
    pub n_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            n_classes: 0,
        }
    }
}

/// Factor applied to the Kaiming bound of the output layer.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

pub fn init_head<S: Real>(cfg: &HeadConfig, d_in: usize, rng: &mut ChaCha8Rng) -> ModelParameters<S> {
    let mut p = ModelParameters::new();
    init_linear(&mut p, "head.fc1", d_in, cfg.hidden, rng);
    // small logits at init keep the first losses near ln C
    let w: Tensor<S> = kaiming_uniform(&[cfg.hidden, cfg.n_classes], cfg.hidden, rng);
    let data = w.data().iter().map(|&v| v * S::of(OUTPUT_INIT_SCALE)).collect();
    p.insert("head.fc2.weight", Tensor::new(&[cfg.hidden, cfg.n_classes], data).expect("shape"));
    p.insert("head.fc2.bias", Tensor::zeros(&[cfg.n_classes]));
    p
}

/// Masked temporal mean of `h[T x F]`, giving `[1 x F]`.
pub fn pool<S: Real>(g: &mut Graph<S>, h: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(m) => g.masked_mean_rows(h, m),
        None => g.mean_over_axis(h, 0),
    }
}

/// Logits `[B x n_classes]` from stacked pooled embeddings `[B x F]`.
pub fn head_logits<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, pooled: Var, fwd: &mut Forward<S>) -> Result<Var> {
    let x = fwd.dropout_var(g, pooled)?;
    let h = linear(g, p, "head.fc1", x)?;
    let h = g.relu(h)?;
    linear(g, p, "head.fc2", h)
}

/// Pool then classify a single `T x F` embedding: logits `[1 x n_classes]`.
pub fn classify_head<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, h: Var, fwd: &mut Forward<S>) -> Result<Var> {
    let pooled = pool(g, h, None)?;
    head_logits(g, p, pooled, fwd)
}
