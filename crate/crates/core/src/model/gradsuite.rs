// SPDX-License-Identifier: Apache-2.0

//! Finite-difference cases for the composite model blocks, on shrunken
//! configurations so each check stays in the millisecond range.

use fusepath_autodiff::fdcheck::suite::{rand_tensor, weighted_sum, Case, Objective};
use fusepath_autodiff::rng::stream;
use fusepath_autodiff::{ModelParameters, Tensor};
use rand_chacha::ChaCha8Rng;

use super::acoustic::{conv_feature_encoder, init_acoustic, transformer_block, ConvLayer};
use super::fusion::{add_fuse, align_temporal, attentive_fuse, concat_fuse, init_fusion};
use super::head::{classify_head, init_head};
use super::tdnn::{init_tdnn, se_block, se_res_block, tdnn_forward};
use super::{init_batch_norm, init_conv, AcousticConfig, ClipInput, Forward, FusionConfig, FusionStyle, HeadConfig};
use super::{ModelKind, Network, TdnnConfig};

pub const COMPOSITES: &[&str] = &[
    "se_block",
    "se_res_block",
    "tdnn_forward",
    "conv_feature_encoder",
    "transformer_block",
    "attentive_fuse",
    "aligned_attentive_fuse",
    "add_fuse",
    "concat_fuse",
    "classify_head",
    "fusion_network",
];

/// Replaces every trainable entry with uniform draws from [-1, 1) so that
/// norm gains and biases are exercised away from their init values.
fn randomize(p: &mut ModelParameters<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = p.iter().filter(|(_, v)| v.trainable).map(|(n, _)| n.clone()).collect();
    for n in names {
        let shape = p.value(&n).expect("listed").shape().to_vec();
        p.get_mut(&n).expect("listed").value = rand_tensor(rng, &shape);
    }
}

fn tiny_tdnn() -> TdnnConfig {
    TdnnConfig {
        in_features: 3,
        channels: 4,
        se_bottleneck: 2,
        dilations: vec![1, 2, 3],
        kernel: 3,
        out_dim: 3,
    }
}

fn tiny_acoustic() -> AcousticConfig {
    AcousticConfig {
        conv_stack: vec![
            ConvLayer { channels: 3, kernel: 5, stride: 3 },
            ConvLayer { channels: 4, kernel: 3, stride: 2 },
        ],
        n_transformer_blocks: 1,
        model_dim: 4,
        n_heads: 2,
        ffn_dim: 6,
    }
}

/// Builds the named composite case with inputs and weights drawn from `seed`.
pub fn composite(name: &str, seed: u64) -> Option<Case> {
    let mut r = stream(seed, name);
    let mut p = ModelParameters::<f64>::new();
    let objective: Objective = match name {
        "se_block" => {
            p.insert("x", rand_tensor(&mut r, &[4, 6]));
            p.insert("w1", rand_tensor(&mut r, &[2, 4]));
            p.insert("w2", rand_tensor(&mut r, &[4, 2]));
            Box::new(|g, p| {
                let (x, w1, w2) = (g.param(p, "x")?, g.param(p, "w1")?, g.param(p, "w2")?);
                let y = se_block(g, x, w1, w2)?;
                weighted_sum(g, y)
            })
        }
        "se_res_block" => {
            // two clips of different length share training-mode statistics
            p.insert("x0", rand_tensor(&mut r, &[4, 7]));
            p.insert("x1", rand_tensor(&mut r, &[4, 5]));
            init_conv(&mut p, "blk.conv", 4, 4, 3, &mut r);
            init_batch_norm(&mut p, "blk.bn", 4);
            p.insert("blk.se.w1", Tensor::zeros(&[2, 4]));
            p.insert("blk.se.w2", Tensor::zeros(&[4, 2]));
            randomize(&mut p, &mut r);
            Box::new(|g, p| {
                let xs = [g.param(p, "x0")?, g.param(p, "x1")?];
                let ys = se_res_block(g, p, "blk", &xs, 3, 2, &mut Forward::train())?;
                let a = weighted_sum(g, ys[0])?;
                let b = weighted_sum(g, ys[1])?;
                g.add(a, b)
            })
        }
        "tdnn_forward" => {
            let cfg = tiny_tdnn();
            p = init_tdnn(&cfg, &mut r);
            p.insert("m0", rand_tensor(&mut r, &[6, 3]));
            p.insert("m1", rand_tensor(&mut r, &[5, 3]));
            randomize(&mut p, &mut r);
            Box::new(move |g, p| {
                let ms = [g.param(p, "m0")?, g.param(p, "m1")?];
                let ys = tdnn_forward(g, p, &cfg, &ms, &mut Forward::train())?;
                let a = weighted_sum(g, ys[0])?;
                let b = weighted_sum(g, ys[1])?;
                g.add(a, b)
            })
        }
        "conv_feature_encoder" => {
            let cfg = AcousticConfig {
                n_transformer_blocks: 0,
                ..tiny_acoustic()
            };
            p = init_acoustic(&cfg, &mut r);
            p.insert("wave", rand_tensor(&mut r, &[1, 40]));
            randomize(&mut p, &mut r);
            Box::new(move |g, p| {
                let w = g.param(p, "wave")?;
                let y = conv_feature_encoder(g, p, &cfg, w)?;
                weighted_sum(g, y)
            })
        }
        "transformer_block" => {
            let cfg = tiny_acoustic();
            p = init_acoustic(&cfg, &mut r).subset("acoustic.block0");
            p.insert("x", rand_tensor(&mut r, &[5, 4]));
            randomize(&mut p, &mut r);
            Box::new(|g, p| {
                let x = g.param(p, "x")?;
                let (y, maps) = transformer_block(g, p, "acoustic.block0", 2, x)?;
                let a = weighted_sum(g, y)?;
                let b = weighted_sum(g, maps[1])?;
                g.add(a, b)
            })
        }
        "attentive_fuse" | "aligned_attentive_fuse" => {
            let t_w = if name == "attentive_fuse" { 5 } else { 7 };
            p = init_fusion(&FusionConfig { dim: 2, style: FusionStyle::Attention }, 3, 4, &mut r);
            p.insert("h_t", rand_tensor(&mut r, &[5, 3]));
            p.insert("h_w", rand_tensor(&mut r, &[t_w, 4]));
            randomize(&mut p, &mut r);
            Box::new(|g, p| {
                let (ht, hw) = (g.param(p, "h_t")?, g.param(p, "h_w")?);
                let (ht, hw) = align_temporal(g, ht, hw)?;
                let f = attentive_fuse(g, p, ht, hw)?;
                let a = weighted_sum(g, f.h_r)?;
                let b = weighted_sum(g, f.scores)?;
                g.add(a, b)
            })
        }
        "add_fuse" => {
            p = init_fusion(&FusionConfig { dim: 2, style: FusionStyle::Add }, 3, 4, &mut r);
            p.insert("h_t", rand_tensor(&mut r, &[5, 3]));
            p.insert("h_w", rand_tensor(&mut r, &[5, 4]));
            randomize(&mut p, &mut r);
            Box::new(|g, p| {
                let (ht, hw) = (g.param(p, "h_t")?, g.param(p, "h_w")?);
                let y = add_fuse(g, p, ht, hw)?;
                weighted_sum(g, y)
            })
        }
        "concat_fuse" => {
            p.insert("h_t", rand_tensor(&mut r, &[5, 3]));
            p.insert("h_w", rand_tensor(&mut r, &[5, 4]));
            Box::new(|g, p| {
                let (ht, hw) = (g.param(p, "h_t")?, g.param(p, "h_w")?);
                let y = concat_fuse(g, ht, hw)?;
                weighted_sum(g, y)
            })
        }
        "classify_head" => {
            p = init_head(&HeadConfig { hidden: 4, n_classes: 3 }, 6, &mut r);
            p.insert("h", rand_tensor(&mut r, &[5, 6]));
            randomize(&mut p, &mut r);
            let label = (seed % 3) as usize;
            Box::new(move |g, p| {
                let h = g.param(p, "h")?;
                // a fixed dropout stream gives the same mask on every pass
                let mut fwd = Forward::train().with_dropout(0.25, stream(seed, "head-dropout"));
                let z = classify_head(g, p, h, &mut fwd)?;
                g.cross_entropy(z, &[label])
            })
        }
        "fusion_network" => {
            let net = Network {
                kind: ModelKind::Fusion(FusionStyle::Attention),
                tdnn: tiny_tdnn(),
                acoustic: tiny_acoustic(),
                fusion: FusionConfig { dim: 2, style: FusionStyle::Attention },
                head: HeadConfig { hidden: 3, n_classes: 2 },
            };
            p = net.init(seed);
            randomize(&mut p, &mut r);
            let clips: Vec<ClipInput<f64>> = [(4, 40), (3, 34)]
                .iter()
                .map(|&(t, n)| ClipInput {
                    mfcc: rand_tensor(&mut r, &[t, 3]),
                    wave: rand_tensor(&mut r, &[1, n]),
                })
                .collect();
            Box::new(move |g, p| {
                let out = net.forward(g, p, &clips, &mut Forward::train())?;
                g.cross_entropy(out.logits, &[0, 1])
            })
        }
        _ => return None,
    };
    Some(Case::new(name, p, objective))
}

/// Every composite case for seeds `0..n_seeds`.
pub fn composite_cases(n_seeds: u64) -> Vec<Case> {
    let mut out = Vec::new();
    for name in COMPOSITES {
        for seed in 0..n_seeds {
            out.push(composite(name, seed).expect("listed composite"));
        }
    }
    out
}
