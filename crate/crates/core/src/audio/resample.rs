// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;

use super::{AudioClip, AudioError};

/// Zero crossings of the sinc kernel kept on each side.
const ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge as a fraction of the lower of the two Nyquist rates.
const CUTOFF: f64 = 0.9;

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Blackman-windowed sinc kernel. The cutoff
/// sits at 0.9 of the lower Nyquist rate, so downsampling is anti-aliased.
/// Output length is `round(len * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidClip("target rate must be positive".into()));
    }
    let source = clip.sample_rate();
    if source == target_rate {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    let n_out = ((x.len() as u64 * target_rate as u64 + source as u64 / 2) / source as u64) as usize;
    let step = source as f64 / target_rate as f64;
    // cutoff in cycles per input sample
    let fc = 0.5 * CUTOFF * (target_rate as f64 / source as f64).min(1.0);
    let half = ZERO_CROSSINGS / (2.0 * fc);
    let mut out = Vec::with_capacity(n_out.max(1));
    for j in 0..n_out {
        let t = j as f64 * step;
        let lo = ((t - half).ceil().max(0.0)) as usize;
        let hi = ((t + half).floor() as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - i as f64;
            acc += xi as f64 * 2.0 * fc * sinc(2.0 * fc * d) * blackman(d / half);
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    if out.is_empty() {
        out.push(0.0);
    }
    AudioClip::new(out, target_rate, clip.label, clip.id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize) -> AudioClip {
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, rate, 3, "sine").unwrap()
    }

    /// Magnitude of the DFT at bin `k`, evaluated directly.
    fn dft_mag(x: &[f32], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let a = -2.0 * PI * k as f64 * i as f64 / n;
            re += v as f64 * a.cos();
            im += v as f64 * a.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn length_and_metadata() {
        let c = sine(440.0, 44100, 44100);
        let r = resample(&c, 16000).unwrap();
        assert_eq!(r.len(), 16000);
        assert_eq!(r.sample_rate(), 16000);
        assert_eq!((r.label, r.id.as_str()), (3, "sine"));
    }

    #[test]
    fn same_rate_is_identity() {
        let c = sine(300.0, 16000, 999);
        assert_eq!(resample(&c, 16000).unwrap(), c);
    }

    #[test]
    fn tone_survives_downsampling() {
        let r = resample(&sine(440.0, 44100, 44100), 16000).unwrap();
        let s = r.samples();
        // 1 s at 16 kHz: bin width 1 Hz, bin k sits at k Hz
        let best = (1..8000).max_by(|&a, &b| dft_mag(s, a).total_cmp(&dft_mag(s, b))).unwrap();
        assert!((best as f64 - 440.0).abs() <= 1.0, "peak at {best} Hz");
    }

    #[test]
    fn content_above_new_nyquist_is_suppressed() {
        // 10 kHz cannot be represented at 16 kHz and must not alias to 6 kHz
        let r = resample(&sine(10000.0, 44100, 44100), 16000).unwrap();
        let rms = (r.samples()[200..15800].iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 15600.0).sqrt();
        assert!(rms < 0.01, "rms {rms}");
    }

    #[test]
    fn deterministic() {
        let c = sine(123.0, 22050, 5000);
        assert_eq!(resample(&c, 16000).unwrap(), resample(&c, 16000).unwrap());
    }
}
