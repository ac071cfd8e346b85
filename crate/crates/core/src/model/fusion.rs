// SPDX-License-Identifier: Apache-2.0

//! Attentive fusion of the two paths plus the Add and Concat baselines.

use std::fmt;
use std::str::FromStr;

use fusepath_autodiff::{AutodiffError, Graph, ModelParameters, Real, Result, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_linear, linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStyle {
    Attention,
    Add,
    Concat,
}

impl FusionStyle {
    pub const ALL: [FusionStyle; 3] = [Self::Attention, Self::Add, Self::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Add => "add",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStyle {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(Self::Attention),
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            _ => Err(format!("unknown fusion style `{s}` (attention|add|concat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Shared query/key dimension `D`; also the attention scale `d_k`.
    pub dim: usize,
    pub style: FusionStyle,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            style: FusionStyle::Attention,
        }
    }
}

/// Fused feature width for `style` given the two path widths.
pub fn fused_dim(style: FusionStyle, d_t: usize, d_w: usize) -> usize {
    match style {
        FusionStyle::Attention | FusionStyle::Concat => d_t + d_w,
        FusionStyle::Add => d_t,
    }
}

pub fn init_fusion<S: Real>(cfg: &FusionConfig, d_t: usize, d_w: usize, rng: &mut ChaCha8Rng) -> ModelParameters<S> {
    let mut p = ModelParameters::new();
    match cfg.style {
        FusionStyle::Attention => {
            init_linear(&mut p, "fusion.q", d_t, cfg.dim, rng);
            init_linear(&mut p, "fusion.k", d_w, cfg.dim, rng);
        }
        FusionStyle::Add if d_t != d_w => init_linear(&mut p, "fusion.add_proj", d_w, d_t, rng),
        _ => {}
    }
    p
}

/// Interpolation matrix `[t_out x t_in]` that linearly resamples a sequence
/// of `t_in` frames to `t_out`, first and last frames aligned.
pub fn interpolation_matrix<S: Real>(t_out: usize, t_in: usize) -> Tensor<S> {
    let mut m = vec![S::zero(); t_out * t_in];
    for i in 0..t_out {
        let pos = if t_out > 1 {
            i as f64 * (t_in - 1) as f64 / (t_out - 1) as f64
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(t_in - 1);
        let hi = (lo + 1).min(t_in - 1);
        let frac = pos - lo as f64;
        m[i * t_in + lo] += S::of(1.0 - frac);
        if hi != lo {
            m[i * t_in + hi] += S::of(frac);
        }
    }
    Tensor::new(&[t_out, t_in], m).expect("matrix shape")
}

/// Resamples `h_w` along time to the frame count of `h_t`.
pub fn align_temporal<S: Real>(g: &mut Graph<S>, h_t: Var, h_w: Var) -> Result<(Var, Var)> {
    let (t_t, t_w) = (g.shape(h_t)[0], g.shape(h_w)[0]);
    if t_t == 0 || t_w == 0 {
        return Err(AutodiffError::ShapeMismatch {
            op: "align_temporal",
            detail: "empty sequence".into(),
        });
    }
    if t_t == t_w {
        return Ok((h_t, h_w));
    }
    let m = g.constant(interpolation_matrix(t_t, t_w));
    Ok((h_t, g.matmul(m, h_w)?))
}

#[derive(Debug, Clone, Copy)]
pub struct FusedEmbedding {
    /// Attention-weighted `h_t`, `T x D_t`.
    pub h_f: Var,
    /// `[h_f, h_w]`, `T x (D_t + D_w)`.
    pub h_r: Var,
    /// Row-stochastic `T x T` frame attention.
    pub scores: Var,
}

fn check_frames<S: Real>(g: &Graph<S>, op: &'static str, h_t: Var, h_w: Var) -> Result<()> {
    let (a, b) = (g.shape(h_t)[0], g.shape(h_w)[0]);
    if a != b {
        return Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("h_t has {a} frames, h_w has {b}"),
        });
    }
    Ok(())
}

/// `q = h_t Wq + bq`, `k = h_w Wk + bk`, `scores = softmax(q kᵀ / sqrt(D))`,
/// `h_f = scores h_t`, `h_r = [h_f, h_w]`.
pub fn attentive_fuse<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, h_t: Var, h_w: Var) -> Result<FusedEmbedding> {
    check_frames(g, "attentive_fuse", h_t, h_w)?;
    let q = linear(g, p, "fusion.q", h_t)?;
    let k = linear(g, p, "fusion.k", h_w)?;
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let scores = g.softmax_rows(logits)?;
    let h_f = g.matmul(scores, h_t)?;
    let h_r = g.concat(&[h_f, h_w], 1)?;
    Ok(FusedEmbedding { h_f, h_r, scores })
}

/// `h_t + h_w`, with `h_w` first projected to `D_t` when the widths differ.
pub fn add_fuse<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, h_t: Var, h_w: Var) -> Result<Var> {
    check_frames(g, "add_fuse", h_t, h_w)?;
    let h_w = if g.shape(h_t)[1] != g.shape(h_w)[1] {
        linear(g, p, "fusion.add_proj", h_w)?
    } else {
        h_w
    };
    g.add(h_t, h_w)
}

/// `[h_t, h_w]` along features.
pub fn concat_fuse<S: Real>(g: &mut Graph<S>, h_t: Var, h_w: Var) -> Result<Var> {
    check_frames(g, "concat_fuse", h_t, h_w)?;
    g.concat(&[h_t, h_w], 1)
}
