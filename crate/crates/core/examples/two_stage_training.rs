// SPDX-License-Identifier: Apache-2.0

//! Synthesises a two-class corpus, trains both paths, fine-tunes the fused
//! model and prints test metrics.
//!
//! cargo run --release --example two_stage_training -- [out_dir]

use std::path::PathBuf;

use fusepath::dataset::{synthesize_corpus, Split, SynthSpec};
use fusepath::metrics::{evaluate, Averaging};
use fusepath::model::{FusionStyle, ModelKind};
use fusepath::train::{stage1_train, stage2_finetune};
use fusepath::{Corpus, RunConfig};

fn main() -> fusepath::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSEPATH_LOG", "info")).init();
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "target/two_stage_demo".into()).into();
    let manifest = synthesize_corpus(&SynthSpec::binary(100, 7), &out.join("corpus"))?;

    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 16;
    let corpus = Corpus::load(&manifest, &cfg.mfcc)?;

    let tdnn = stage1_train(&cfg, &corpus, ModelKind::Tdnn)?;
    let acoustic = stage1_train(&cfg, &corpus, ModelKind::Acoustic)?;
    let fused = stage2_finetune(&cfg, &corpus, FusionStyle::Attention, &tdnn.params, &acoustic.params)?;

    for (name, t) in [("tdnn", &tdnn), ("acoustic", &acoustic), ("fusion", &fused)] {
        let r = evaluate(&t.net, &t.params, &corpus, Split::Test, Averaging::Macro, 16)?;
        println!("{name:>9}  acc {:.3}  f1 {:.3}", r.accuracy, r.macro_f1);
    }
    Ok(())
}
