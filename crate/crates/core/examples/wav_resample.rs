// SPDX-License-Identifier: Apache-2.0

//! Writes a 44.1 kHz tone, reads it back and resamples to the 16 kHz model
//! rate.
//!
//! cargo run --example wav_resample -- [out.wav]

use fusepath::audio::{load_wav, resample, write_wav_pcm16, AudioError};

fn main() -> Result<(), AudioError> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/tone_44k.wav".into());
    let tone: Vec<f32> = (0..44100)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 44100.0).sin() as f32)
        .collect();
    write_wav_pcm16(path.as_ref(), &tone, 44100)?;

    let clip = load_wav(path.as_ref())?;
    let down = resample(&clip, 16000)?;
    println!("{}: {} samples at {} Hz", path, clip.len(), clip.sample_rate());
    println!("resampled: {} samples at {} Hz, {:.3} s", down.len(), down.sample_rate(), down.duration_s());
    let peak = down.samples().iter().fold(0f32, |m, v| m.max(v.abs()));
    println!("peak amplitude {peak:.3}");
    Ok(())
}
