// SPDX-License-Identifier: Apache-2.0

//! Time-delay front encoder over MFCC frames: two convolutions, three
//! squeeze-excitation residual blocks and a projection to `out_dim`.

use fusepath_autodiff::{kaiming_uniform, AutodiffError, ConvSpec, Graph, ModelParameters, Real, Result, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_norm, init_batch_norm, init_conv, Forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdnnConfig {
    pub in_features: usize,
    pub channels: usize,
    pub se_bottleneck: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub out_dim: usize,
}

impl Default for TdnnConfig {
    fn default() -> Self {
        Self {
            in_features: 20,
            channels: 64,
            se_bottleneck: 16,
            dilations: vec![2, 3, 4],
            kernel: 3,
            out_dim: 64,
        }
    }
}

impl TdnnConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dilations.len() != 3 {
            return Err(format!("tdnn.dilations must list 3 values, got {}", self.dilations.len()));
        }
        if self.dilations.contains(&0) {
            return Err("tdnn.dilations must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return Err(format!("tdnn.kernel must be odd, got {}", self.kernel));
        }
        if self.se_bottleneck == 0 || self.channels < self.se_bottleneck {
            return Err(format!(
                "tdnn.channels ({}) must be >= tdnn.se_bottleneck ({}) > 0",
                self.channels, self.se_bottleneck
            ));
        }
        if self.in_features == 0 || self.out_dim == 0 {
            return Err("tdnn.in_features and tdnn.out_dim must be positive".into());
        }
        Ok(())
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let (c, f, k, b) = (self.channels, self.in_features, self.kernel, self.se_bottleneck);
        let conv1 = c * f * 5 + c;
        let conv2 = c * c * 3 + c;
        let bn = 2 * c;
        let block = (c * c * k + c) + bn + 2 * b * c;
        let proj = self.out_dim * c + self.out_dim;
        conv1 + bn + conv2 + bn + 3 * block + proj
    }
}

pub fn init_tdnn<S: Real>(cfg: &TdnnConfig, rng: &mut ChaCha8Rng) -> ModelParameters<S> {
    let mut p = ModelParameters::new();
    let c = cfg.channels;
    init_conv(&mut p, "tdnn.conv1", cfg.in_features, c, 5, rng);
    init_batch_norm(&mut p, "tdnn.bn1", c);
    init_conv(&mut p, "tdnn.conv2", c, c, 3, rng);
    init_batch_norm(&mut p, "tdnn.bn2", c);
    for i in 0..cfg.dilations.len() {
        let name = format!("tdnn.block{i}");
        init_conv(&mut p, &format!("{name}.conv"), c, c, cfg.kernel, rng);
        init_batch_norm(&mut p, &format!("{name}.bn"), c);
        let b = cfg.se_bottleneck;
        p.insert(format!("{name}.se.w1"), kaiming_uniform(&[b, c], c, rng));
        p.insert(format!("{name}.se.w2"), kaiming_uniform(&[c, b], b, rng));
    }
    init_conv(&mut p, "tdnn.proj", c, cfg.out_dim, 1, rng);
    p
}

/// Squeeze-excitation gate on `x[C x T]`:
/// `s = sigmoid(w2 relu(w1 mean_T(x)))`, each channel row scaled by `s`.
pub fn se_block<S: Real>(g: &mut Graph<S>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let squeeze = g.mean_over_axis(x, 1)?;
    let z = g.matmul(w1, squeeze)?;
    let z = g.relu(z)?;
    let z = g.matmul(w2, z)?;
    let s = g.sigmoid(z)?;
    g.mul_col_vec(x, s)
}

fn conv<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.conv1d(x, w, b, spec)
}

/// `y = x + se(bn(relu(conv_dilated(x))))` for every clip of a batch.
pub fn se_res_block<S: Real>(
    g: &mut Graph<S>,
    p: &ModelParameters<S>,
    name: &str,
    xs: &[Var],
    kernel: usize,
    dilation: usize,
    fwd: &mut Forward<S>,
) -> Result<Vec<Var>> {
    let spec = ConvSpec::same(kernel, dilation);
    let mut hs = Vec::with_capacity(xs.len());
    for &x in xs {
        let h = conv(g, p, &format!("{name}.conv"), x, spec)?;
        hs.push(g.relu(h)?);
    }
    let hs = batch_norm(g, p, &format!("{name}.bn"), &hs, fwd)?;
    let w1 = g.param(p, &format!("{name}.se.w1"))?;
    let w2 = g.param(p, &format!("{name}.se.w2"))?;
    xs.iter()
        .zip(hs)
        .map(|(&x, h)| {
            let s = se_block(g, h, w1, w2)?;
            g.add(x, s)
        })
        .collect()
}

/// Encodes each `T_i x in_features` MFCC matrix of a batch to `T_i x out_dim`.
pub fn tdnn_forward<S: Real>(
    g: &mut Graph<S>,
    p: &ModelParameters<S>,
    cfg: &TdnnConfig,
    mfcc: &[Var],
    fwd: &mut Forward<S>,
) -> Result<Vec<Var>> {
    let mut xs = Vec::with_capacity(mfcc.len());
    for &m in mfcc {
        let f = g.shape(m)[1];
        if f != cfg.in_features {
            return Err(AutodiffError::ShapeMismatch {
                op: "tdnn_forward",
                detail: format!("feature dimension {f}, configured in_features {}", cfg.in_features),
            });
        }
        let x = g.transpose(m)?;
        let h = conv(g, p, "tdnn.conv1", x, ConvSpec::same(5, 1))?;
        xs.push(g.relu(h)?);
    }
    let xs = batch_norm(g, p, "tdnn.bn1", &xs, fwd)?;
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        let h = conv(g, p, "tdnn.conv2", x, ConvSpec::same(3, 1))?;
        hs.push(g.relu(h)?);
    }
    let mut xs = batch_norm(g, p, "tdnn.bn2", &hs, fwd)?;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        xs = se_res_block(g, p, &format!("tdnn.block{i}"), &xs, cfg.kernel, d, fwd)?;
    }
    xs.into_iter()
        .map(|x| {
            let y = conv(g, p, "tdnn.proj", x, ConvSpec::same(1, 1))?;
            g.transpose(y)
        })
        .collect()
}
