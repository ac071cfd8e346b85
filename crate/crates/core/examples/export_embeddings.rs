// SPDX-License-Identifier: Apache-2.0

//! Briefly trains the fused model end to end and writes pooled test-split
//! embeddings as CSV, ready for an external 2-D projection.
//!
//! cargo run --release --example export_embeddings -- [out.csv]

use fusepath::dataset::{synthesize_corpus, Split, SynthSpec};
use fusepath::metrics::export_embeddings;
use fusepath::model::FusionStyle;
use fusepath::train::end_to_end_train;
use fusepath::{Corpus, RunConfig};

fn main() -> fusepath::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/embeddings.csv".into());
    let dir = std::env::temp_dir().join(format!("fusepath_emb_{}", std::process::id()));
    let manifest = synthesize_corpus(&SynthSpec::binary(40, 3), &dir)?;
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 16;
    cfg.train.epochs_end_to_end = 3;
    let corpus = Corpus::load(&manifest, &cfg.mfcc)?;
    let t = end_to_end_train(&cfg, &corpus, FusionStyle::Attention)?;
    let rows = export_embeddings(&t.net, &t.params, &corpus, Split::Test, 16, out.as_ref())?;
    println!("{rows} embeddings of width {} written to {out}", t.net.embedding_dim());
    Ok(())
}
