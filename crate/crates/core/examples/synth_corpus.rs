// SPDX-License-Identifier: Apache-2.0

//! Generates the four-class synthetic corpus and summarises its manifest.
//!
//! cargo run --example synth_corpus -- [out_dir]

use std::collections::BTreeMap;

use fusepath::dataset::{synthesize_corpus, SynthSpec};

fn main() -> Result<(), fusepath::dataset::DatasetError> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synth_four_class".into());
    let m = synthesize_corpus(&SynthSpec::four_class(20, 1), out.as_ref())?;
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for e in &m.entries {
        *counts.entry((e.label.clone(), e.split.as_str().to_string())).or_default() += 1;
    }
    println!("{} clips, {} classes, manifest in {out}", m.entries.len(), m.n_classes());
    for ((label, split), n) in counts {
        println!("  {label:<12} {split:<5} {n}");
    }
    Ok(())
}
