// SPDX-License-Identifier: Apache-2.0

//! Trains every ablation cell on a small synthetic corpus and prints the
//! summary table. Use the `ablate` subcommand for full-size runs.
//!
//! cargo run --release --example ablation -- [n_per_class] [epochs]

use fusepath::ablation::ablation_matrix;
use fusepath::dataset::{synthesize_corpus, SynthSpec};
use fusepath::{Corpus, RunConfig};

fn main() -> fusepath::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSEPATH_LOG", "info")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let n = args.next().unwrap_or(30);
    let epochs = args.next().unwrap_or(5);

    let dir = tempfile_dir();
    let manifest = synthesize_corpus(&SynthSpec::binary(n, 7), &dir)?;
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 16;
    cfg.train.epochs_stage1 = epochs;
    cfg.train.epochs_stage2 = epochs;
    cfg.train.epochs_end_to_end = epochs;
    let corpus = Corpus::load(&manifest, &cfg.mfcc)?;
    let report = ablation_matrix(&cfg, &corpus, None)?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("fusepath_ablation_{}", std::process::id()))
}
