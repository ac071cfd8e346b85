// SPDX-License-Identifier: Apache-2.0

//! MFCC front end on a synthetic vowel: frame count, per-coefficient means
//! before and after CMVN.
//!
//! cargo run --example mfcc_features

use fusepath::audio::{cmvn, mfcc, AudioClip, MfccConfig};

fn main() -> Result<(), fusepath::audio::AudioError> {
    let rate = 16000;
    // 150 Hz glottal-ish buzz with two formant-like partials
    let samples: Vec<f32> = (0..rate)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let w = 2.0 * std::f64::consts::PI * 150.0 * t;
            (0.5 * w.sin() + 0.2 * (5.0 * w).sin() + 0.1 * (15.0 * w).sin()) as f32
        })
        .collect();
    let clip = AudioClip::new(samples, rate, 0, "buzz")?;
    let cfg = MfccConfig::default();
    let raw = mfcc(&clip, &cfg)?;
    let norm = cmvn(&raw);
    println!("{} frames x {} coefficients at {} frames/s", raw.frames(), raw.features(), raw.frame_rate);
    for c in 0..4 {
        let mean = |m: &fusepath::audio::FeatureMatrix| m.column(c).sum::<f64>() / m.frames() as f64;
        println!("c{c}: raw mean {:>9.3}  normalised mean {:>9.2e}", mean(&raw), mean(&norm));
    }
    Ok(())
}
