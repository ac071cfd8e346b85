// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioClip, AudioError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            n_mfcc: 20,
            f_min: 20.0,
            f_max: 7600.0,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames for `n` samples, `None` when shorter than a window.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        (n >= win).then(|| (n - win) / hop + 1)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), AudioError> {
        let bad = |m: String| Err(AudioError::InvalidConfig(m));
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad(format!("n_mfcc {} must be in 1..={}", self.n_mfcc, self.n_mels));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= f_min ({}) < f_max ({}) <= {}",
                self.f_min,
                self.f_max,
                sample_rate as f64 / 2.0
            ));
        }
        let win = self.window_samples(sample_rate);
        if win == 0 || self.hop_samples(sample_rate) == 0 {
            return bad("window and hop must span at least one sample".into());
        }
        if self.n_fft < win {
            return bad(format!("n_fft {} shorter than the {win}-sample window", self.n_fft));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// Frame-major real matrix (`T` frames by `F` features).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    features: usize,
    data: Vec<f64>,
    pub frame_rate: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, features: usize, data: Vec<f64>, frame_rate: f64) -> Result<Self, AudioError> {
        if frames == 0 || features == 0 || data.len() != frames * features {
            return Err(AudioError::InvalidClip(format!(
                "feature matrix {frames}x{features} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AudioError::InvalidClip("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            features,
            data,
            frame_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.features..(t + 1) * self.features]
    }

    pub fn column(&self, f: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(f).step_by(self.features).copied()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters (`n_mels` rows by `n_fft / 2 + 1` bins) with corners
/// equally spaced on the mel scale between `f_min` and `f_max`. Peaks are 1;
/// no area normalisation.
pub fn mel_filterbank(cfg: &MfccConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let corners: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (corners[m], corners[m + 1], corners[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / cfg.n_fft as f64;
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II basis, `n_out` rows by `n_in` columns.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    let n = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_in)
                .map(|i| scale * (PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .collect()
        })
        .collect()
}

/// Pre-emphasis, Hann-windowed frames, power spectrum, mel energies, log and
/// DCT. Requires a 16 kHz clip.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix, AudioError> {
    let sr = clip.sample_rate();
    if sr != 16000 {
        return Err(AudioError::InvalidClip(format!("MFCC expects 16000 Hz input, got {sr}")));
    }
    cfg.validate(sr)?;
    let x = clip.samples();
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    let frames = cfg.frame_count(x.len(), sr).ok_or(AudioError::TooShort {
        samples: x.len(),
        window: win,
    })?;

    let mut emph = Vec::with_capacity(x.len());
    emph.push(x[0] as f64);
    emph.extend(x.windows(2).map(|w| w[1] as f64 - cfg.pre_emphasis * w[0] as f64));

    let hann: Vec<f64> = (0..win).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()).collect();
    let fb = mel_filterbank(cfg, sr);
    let dct = dct_matrix(cfg.n_mfcc, cfg.n_mels);
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;

    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; bins];
    let mut logmel = vec![0.0; cfg.n_mels];
    let mut out = Vec::with_capacity(frames * cfg.n_mfcc);
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(emph[start + i] * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for (lm, filt) in logmel.iter_mut().zip(&fb) {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *lm = e.max(cfg.log_floor).ln();
        }
        out.extend(dct.iter().map(|row| row.iter().zip(&logmel).map(|(d, l)| d * l).sum::<f64>()));
    }
    FeatureMatrix::new(frames, cfg.n_mfcc, out, 1000.0 / cfg.hop_ms)
}

/// Per-utterance mean and variance normalisation of every feature column
/// (population standard deviation, offset by 1e-8).
pub fn cmvn(feat: &FeatureMatrix) -> FeatureMatrix {
    let (t, f) = (feat.frames, feat.features);
    let mut data = feat.data.clone();
    for c in 0..f {
        let mean = feat.column(c).sum::<f64>() / t as f64;
        let var = feat.column(c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let denom = var.sqrt() + 1e-8;
        for r in 0..t {
            data[r * f + c] = (data[r * f + c] - mean) / denom;
        }
    }
    FeatureMatrix {
        data,
        ..feat.clone()
    }
}

/// Writes `"FMX1"`, `u32 T`, `u32 F`, `f64 frame_rate`, then `T * F`
/// row-major `f32` values, all little-endian.
pub fn write_feature_dump(path: &Path, feat: &FeatureMatrix) -> Result<(), AudioError> {
    let mut b = Vec::with_capacity(20 + feat.data.len() * 4);
    b.extend_from_slice(b"FMX1");
    b.extend_from_slice(&(feat.frames as u32).to_le_bytes());
    b.extend_from_slice(&(feat.features as u32).to_le_bytes());
    b.extend_from_slice(&feat.frame_rate.to_le_bytes());
    for v in &feat.data {
        b.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let io = |e| AudioError::Io {
        path: path.display().to_string(),
        source: e,
    };
    std::fs::File::create(path).and_then(|mut f| f.write_all(&b)).map_err(io)
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureMatrix, AudioError> {
    let b = std::fs::read(path).map_err(|e| AudioError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if b.len() < 20 || &b[..4] != b"FMX1" {
        return Err(AudioError::BadDump("missing FMX1 header".into()));
    }
    let t = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let rate = f64::from_le_bytes(b[12..20].try_into().unwrap());
    if b.len() != 20 + t * f * 4 {
        return Err(AudioError::BadDump(format!("{t}x{f} payload but {} bytes", b.len() - 20)));
    }
    let data = b[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMatrix::new(t, f, data, rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new(samples, 16000, 0, "c").unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32 * 0.5
            })
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = mfcc(&clip(noise(16000, 1)), &MfccConfig::default()).unwrap();
        assert_eq!((f.frames(), f.features()), (98, 20));
        assert_eq!(f.frame_rate, 100.0);
    }

    #[test]
    fn silence_gives_constant_cepstrum() {
        let cfg = MfccConfig::default();
        let f = mfcc(&clip(vec![0.0; 4000]), &cfg).unwrap();
        let c0 = (cfg.n_mels as f64).sqrt() * cfg.log_floor.ln();
        for t in 0..f.frames() {
            let row = f.row(t);
            assert!((row[0] - c0).abs() < 1e-9 * c0.abs());
            assert!(row[1..].iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn mel_anchor() {
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn too_short_clip() {
        assert!(matches!(
            mfcc(&clip(vec![0.1; 399]), &MfccConfig::default()),
            Err(AudioError::TooShort { samples: 399, window: 400 })
        ));
    }

    #[test]
    fn config_invariants() {
        let mut c = MfccConfig::default();
        c.n_mfcc = 41;
        assert!(c.validate(16000).is_err());
        let mut c = MfccConfig::default();
        c.f_max = 9000.0;
        assert!(c.validate(16000).is_err());
        let mut c = MfccConfig::default();
        c.n_fft = 256;
        assert!(c.validate(16000).is_err());
        assert!(MfccConfig::default().validate(16000).is_ok());
    }

    #[test]
    fn filterbank_shape_and_partition() {
        let cfg = MfccConfig::default();
        let fb = mel_filterbank(&cfg, 16000);
        assert_eq!(fb.len(), 40);
        assert!(fb.iter().flatten().all(|&w| w >= 0.0 && w <= 1.0));
        // between the first and last centres adjacent triangles sum to one
        let lo = mel_to_hz(hz_to_mel(cfg.f_min) + (hz_to_mel(cfg.f_max) - hz_to_mel(cfg.f_min)) / 41.0);
        let hi = mel_to_hz(hz_to_mel(cfg.f_min) + (hz_to_mel(cfg.f_max) - hz_to_mel(cfg.f_min)) * 40.0 / 41.0);
        for k in 0..257 {
            let f = k as f64 * 16000.0 / 512.0;
            let total: f64 = fb.iter().map(|r| r[k]).sum();
            if f >= lo && f <= hi {
                assert!((total - 1.0).abs() < 1e-9, "bin {k}: {total}");
            }
            if f < cfg.f_min || f > cfg.f_max {
                assert_eq!(total, 0.0);
            }
        }
    }

    #[test]
    fn trailing_zeros_within_hop_do_not_change_features() {
        // N - win divisible by hop, so up to hop - 1 extra samples add no frame
        let base = noise(400 + 160 * 20, 9);
        let cfg = MfccConfig::default();
        let want = mfcc(&clip(base.clone()), &cfg).unwrap();
        for extra in [1, 80, 159] {
            let mut s = base.clone();
            s.extend(std::iter::repeat(0.0).take(extra));
            assert_eq!(mfcc(&clip(s), &cfg).unwrap(), want);
        }
    }

    #[test]
    fn cmvn_examples() {
        let f = FeatureMatrix::new(2, 2, vec![1.0, 5.0, 3.0, 5.0], 100.0).unwrap();
        let n = cmvn(&f);
        assert!((n.data()[0] + 1.0).abs() < 1e-7);
        assert!((n.data()[2] - 1.0).abs() < 1e-7);
        assert_eq!((n.data()[1], n.data()[3]), (0.0, 0.0));
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.fmx");
        let f = FeatureMatrix::new(3, 2, vec![0.5, -1.0, 2.0, 0.25, 3.0, -4.5], 100.0).unwrap();
        write_feature_dump(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FMX1");
        assert_eq!(bytes.len(), 20 + 6 * 4);
        assert_eq!(read_feature_dump(&p).unwrap(), f);
    }
}
