// SPDX-License-Identifier: Apache-2.0

//! Raw-waveform encoder: a strided convolutional feature encoder followed by
//! pre-norm transformer blocks.

use fusepath_autodiff::{AutodiffError, ConvSpec, Graph, ModelParameters, Real, Result, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_conv, init_linear, init_norm, layer_norm, linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticConfig {
    pub conv_stack: Vec<ConvLayer>,
    pub n_transformer_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        let layer = |kernel, stride| ConvLayer {
            channels: 64,
            kernel,
            stride,
        };
        Self {
            conv_stack: vec![layer(10, 5), layer(3, 2), layer(3, 2), layer(2, 2), layer(2, 2)],
            n_transformer_blocks: 4,
            model_dim: 64,
            n_heads: 4,
            ffn_dim: 128,
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let Some(last) = self.conv_stack.last() else {
            return Err("acoustic.conv_stack must not be empty".into());
        };
        if self.conv_stack.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err("acoustic.conv_stack entries must be positive".into());
        }
        if last.channels != self.model_dim {
            return Err(format!(
                "acoustic.conv_stack last channels ({}) must equal acoustic.model_dim ({})",
                last.channels, self.model_dim
            ));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(format!(
                "acoustic.model_dim ({}) must be divisible by acoustic.n_heads ({})",
                self.model_dim, self.n_heads
            ));
        }
        if self.ffn_dim == 0 {
            return Err("acoustic.ffn_dim must be positive".into());
        }
        Ok(())
    }

    /// Frame count after the convolutional stack, `None` when the waveform
    /// is shorter than its receptive field.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.conv_stack.iter().try_fold(samples, |len, l| {
            ConvSpec::strided(l.stride).output_len(len, l.kernel)
        })
    }

    /// Smallest waveform that yields one frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_stack.iter().rev().fold(1, |r, l| (r - 1) * l.stride + l.kernel)
    }
}

pub fn init_acoustic<S: Real>(cfg: &AcousticConfig, rng: &mut ChaCha8Rng) -> ModelParameters<S> {
    let mut p = ModelParameters::new();
    let mut c_in = 1;
    for (i, l) in cfg.conv_stack.iter().enumerate() {
        init_conv(&mut p, &format!("acoustic.conv{i}"), c_in, l.channels, l.kernel, rng);
        init_norm(&mut p, &format!("acoustic.conv{i}.ln"), l.channels);
        c_in = l.channels;
    }
    let d = cfg.model_dim;
    for i in 0..cfg.n_transformer_blocks {
        let name = format!("acoustic.block{i}");
        init_norm(&mut p, &format!("{name}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            init_linear(&mut p, &format!("{name}.attn.{proj}"), d, d, rng);
        }
        init_norm(&mut p, &format!("{name}.ln2"), d);
        init_linear(&mut p, &format!("{name}.ffn1"), d, cfg.ffn_dim, rng);
        init_linear(&mut p, &format!("{name}.ffn2"), cfg.ffn_dim, d, rng);
    }
    init_norm(&mut p, "acoustic.final_ln", d);
    p
}

/// `[1 x N]` waveform to `[T_w x model_dim]` frames: each layer is a strided
/// convolution, a layer norm over channels and a relu.
pub fn conv_feature_encoder<S: Real>(
    g: &mut Graph<S>,
    p: &ModelParameters<S>,
    cfg: &AcousticConfig,
    wave: Var,
) -> Result<Var> {
    let n = g.shape(wave)[1];
    if cfg.frames_for(n).is_none() {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv_feature_encoder",
            detail: format!("waveform of {n} samples is shorter than the receptive field {}", cfg.receptive_field()),
        });
    }
    let mut x = wave;
    let mut frames = x;
    for (i, l) in cfg.conv_stack.iter().enumerate() {
        let name = format!("acoustic.conv{i}");
        let w = g.param(p, &format!("{name}.weight"))?;
        let b = g.param(p, &format!("{name}.bias"))?;
        let h = g.conv1d(x, w, b, ConvSpec::strided(l.stride))?;
        let h = g.transpose(h)?;
        let h = layer_norm(g, p, &format!("{name}.ln"), h)?;
        frames = g.relu(h)?;
        if i + 1 < cfg.conv_stack.len() {
            x = g.transpose(frames)?;
        }
    }
    Ok(frames)
}

/// Sinusoidal position table `[t x d]`.
pub fn positional_encoding<S: Real>(t: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = S::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[t, d], data).expect("table shape")
}

/// Pre-norm block `x + MHSA(LN(x))` then `+ FFN(LN(.))`. Also returns each
/// head's `T x T` attention matrix.
pub fn transformer_block<S: Real>(
    g: &mut Graph<S>,
    p: &ModelParameters<S>,
    name: &str,
    n_heads: usize,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(x)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(AutodiffError::ShapeMismatch {
            op: "transformer_block",
            detail: format!("model dim {d} with {n_heads} heads"),
        });
    }
    let dh = d / n_heads;
    let a = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let q = linear(g, p, &format!("{name}.attn.q"), a)?;
    let k = linear(g, p, &format!("{name}.attn.k"), a)?;
    let v = linear(g, p, &format!("{name}.attn.v"), a)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut maps = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let o = linear(g, p, &format!("{name}.attn.o"), cat)?;
    let x1 = g.add(x, o)?;
    let b = layer_norm(g, p, &format!("{name}.ln2"), x1)?;
    let f = linear(g, p, &format!("{name}.ffn1"), b)?;
    let f = g.relu(f)?;
    let f = linear(g, p, &format!("{name}.ffn2"), f)?;
    Ok((g.add(x1, f)?, maps))
}

/// `[1 x N]` waveform to `h_w [T_w x model_dim]`.
pub fn acoustic_forward<S: Real>(
    g: &mut Graph<S>,
    p: &ModelParameters<S>,
    cfg: &AcousticConfig,
    wave: Var,
) -> Result<Var> {
    let frames = conv_feature_encoder(g, p, cfg, wave)?;
    let (t, d) = (g.shape(frames)[0], g.shape(frames)[1]);
    let pe = g.constant(positional_encoding(t, d));
    let mut x = g.add(frames, pe)?;
    for i in 0..cfg.n_transformer_blocks {
        x = transformer_block(g, p, &format!("acoustic.block{i}"), cfg.n_heads, x)?.0;
    }
    layer_norm(g, p, "acoustic.final_ln", x)
}
