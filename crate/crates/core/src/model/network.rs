// SPDX-License-Identifier: Apache-2.0

//! Single-path and fused classifiers assembled from the blocks.

use std::fmt;
use std::str::FromStr;

use fusepath_autodiff::{rng::stream, Graph, ModelParameters, Real, Result, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::acoustic::{acoustic_forward, init_acoustic};
use super::fusion::{add_fuse, align_temporal, attentive_fuse, concat_fuse, fused_dim, init_fusion};
use super::head::{head_logits, init_head, pool};
use super::tdnn::{init_tdnn, tdnn_forward};
use super::{AcousticConfig, Forward, FusionConfig, FusionStyle, HeadConfig, TdnnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "style")]
pub enum ModelKind {
    Tdnn,
    Acoustic,
    Fusion(FusionStyle),
}

impl ModelKind {
    pub fn uses_tdnn(self) -> bool {
        !matches!(self, Self::Acoustic)
    }

    pub fn uses_acoustic(self) -> bool {
        !matches!(self, Self::Tdnn)
    }

    /// Parameter prefix of a single-path encoder.
    pub fn encoder_prefix(self) -> Option<&'static str> {
        match self {
            Self::Tdnn => Some("tdnn."),
            Self::Acoustic => Some("acoustic."),
            Self::Fusion(_) => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tdnn => f.write_str("tdnn"),
            Self::Acoustic => f.write_str("acoustic"),
            Self::Fusion(s) => write!(f, "fusion-{s}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tdnn" => Ok(Self::Tdnn),
            "acoustic" => Ok(Self::Acoustic),
            _ => match s.strip_prefix("fusion-") {
                Some(style) => Ok(Self::Fusion(style.parse()?)),
                None => Err(format!("unknown model kind `{s}`")),
            },
        }
    }
}

/// One clip ready for the encoders: CMVN-normalised MFCC `[T x F]` and the
/// waveform `[1 x N]`, both trimmed to their valid length.
#[derive(Debug, Clone)]
pub struct ClipInput<S> {
    pub mfcc: Tensor<S>,
    pub wave: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `[B x n_classes]`.
    pub logits: Var,
    /// Pooled pre-head embeddings `[B x F]`.
    pub pooled: Var,
    /// Fusion attention per clip; empty for non-attentive models.
    pub scores: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub kind: ModelKind,
    pub tdnn: TdnnConfig,
    pub acoustic: AcousticConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
}

impl Network {
    pub fn embedding_dim(&self) -> usize {
        match self.kind {
            ModelKind::Tdnn => self.tdnn.out_dim,
            ModelKind::Acoustic => self.acoustic.model_dim,
            ModelKind::Fusion(style) => fused_dim(style, self.tdnn.out_dim, self.acoustic.model_dim),
        }
    }

    /// Fresh parameters. Each block draws from its own named stream so that
    /// enabling one path does not shift another's initial weights.
    pub fn init<S: Real>(&self, seed: u64) -> ModelParameters<S> {
        let mut p = ModelParameters::new();
        if self.kind.uses_tdnn() {
            p.merge(init_tdnn(&self.tdnn, &mut stream(seed, "init.tdnn")));
        }
        if self.kind.uses_acoustic() {
            p.merge(init_acoustic(&self.acoustic, &mut stream(seed, "init.acoustic")));
        }
        if let ModelKind::Fusion(style) = self.kind {
            let cfg = FusionConfig {
                style,
                ..self.fusion.clone()
            };
            let rng = &mut stream(seed, "init.fusion");
            p.merge(init_fusion(&cfg, self.tdnn.out_dim, self.acoustic.model_dim, rng));
        }
        p.merge(init_head(&self.head, self.embedding_dim(), &mut stream(seed, "init.head")));
        p
    }

    /// Forward pass over a batch. Clip outputs depend only on the clip itself
    /// except through training-mode batch statistics.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &ModelParameters<S>,
        clips: &[ClipInput<S>],
        fwd: &mut Forward<S>,
    ) -> Result<BatchOutput> {
        let h_t = if self.kind.uses_tdnn() {
            let mfcc: Vec<Var> = clips.iter().map(|c| g.constant(c.mfcc.clone())).collect();
            tdnn_forward(g, p, &self.tdnn, &mfcc, fwd)?
        } else {
            Vec::new()
        };
        let h_w = if self.kind.uses_acoustic() {
            clips
                .iter()
                .map(|c| {
                    let w = g.constant(c.wave.clone());
                    acoustic_forward(g, p, &self.acoustic, w)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut pooled = Vec::with_capacity(clips.len());
        let mut scores = Vec::new();
        for i in 0..clips.len() {
            let h = match self.kind {
                ModelKind::Tdnn => h_t[i],
                ModelKind::Acoustic => h_w[i],
                ModelKind::Fusion(style) => {
                    let (ht, hw) = align_temporal(g, h_t[i], h_w[i])?;
                    match style {
                        FusionStyle::Attention => {
                            let f = attentive_fuse(g, p, ht, hw)?;
                            scores.push(f.scores);
                            f.h_r
                        }
                        FusionStyle::Add => add_fuse(g, p, ht, hw)?,
                        FusionStyle::Concat => concat_fuse(g, ht, hw)?,
                    }
                }
            };
            pooled.push(pool(g, h, None)?);
        }
        let pooled = if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, 0)? };
        let logits = head_logits(g, p, pooled, fwd)?;
        Ok(BatchOutput { logits, pooled, scores })
    }
}
