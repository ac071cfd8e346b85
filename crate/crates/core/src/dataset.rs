// SPDX-License-Identifier: Apache-2.0

//! Corpus manifests and the synthetic voice generator.
//!
//! A manifest is JSON lines, one clip per line:
//!
//! ```text
//! {"path": "healthy/healthy_0000.wav", "label": "healthy", "split": "train"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Any corpus,
//! FEMH- or SVD-style, can be used by writing such a file for it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{write_wav_pcm16, AudioError};
use fusepath_autodiff::rng::stream;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("manifest {0} has no entries")]
    Empty(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Sorted distinct labels mapped to class indices.
    pub label_map: BTreeMap<String, usize>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>, root: PathBuf) -> Self {
        let labels: BTreeSet<&String> = entries.iter().map(|e| &e.label).collect();
        let label_map = labels.into_iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self {
            entries,
            label_map,
            root,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn class_of(&self, e: &ManifestEntry) -> usize {
        self.label_map[&e.label]
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        let p = Path::new(&e.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Parses and validates a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root, &path.display().to_string())
}

pub fn parse_manifest(text: &str, root: PathBuf, name: &str) -> Result<Manifest, DatasetError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| DatasetError::Line { line, message };
        let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| err(format!("invalid JSON: {e}")))?;
        let field = |k: &str| -> Result<String, DatasetError> {
            match v.get(k) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(err(format!("key `{k}` must be a string"))),
                None => Err(err(format!("missing key `{k}`"))),
            }
        };
        let (p, label, split) = (field("path")?, field("label")?, field("split")?);
        let split = Split::parse(&split).ok_or_else(|| err(format!("unknown split tag `{split}`")))?;
        if !seen.insert(p.clone()) {
            return Err(err(format!("duplicate path `{p}`")));
        }
        entries.push(ManifestEntry { path: p, label, split });
    }
    if entries.is_empty() {
        return Err(DatasetError::Empty(name.to_string()));
    }
    Ok(Manifest::from_entries(entries, root))
}

/// Voice parameters for one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceProfile {
    pub name: String,
    /// Fundamental frequency range in Hz; each clip draws one value.
    pub f0_hz: [f64; 2],
    /// Cycle-to-cycle period perturbation, percent standard deviation.
    pub jitter_pct: f64,
    /// Cycle-to-cycle amplitude perturbation, percent standard deviation.
    pub shimmer_pct: f64,
    /// Voiced signal to breath noise ratio in dB.
    pub snr_db: f64,
    pub duration_s: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub classes: Vec<VoiceProfile>,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> u32 {
    16000
}

impl SynthSpec {
    /// Two classes mirroring a pathology-versus-health task.
    pub fn binary(n_per_class: usize, seed: u64) -> Self {
        let profile = |name: &str, jitter_pct, shimmer_pct, snr_db| VoiceProfile {
            name: name.into(),
            f0_hz: [100.0, 220.0],
            jitter_pct,
            shimmer_pct,
            snr_db,
            duration_s: [0.3, 0.4],
        };
        Self {
            n_per_class,
            classes: vec![
                profile("healthy", 0.2, 1.0, 30.0),
                profile("disordered", 3.0, 8.0, 10.0),
            ],
            sample_rate: 16000,
            seed,
        }
    }

    /// Four disorder-like classes mirroring a four-way diagnosis task.
    pub fn four_class(n_per_class: usize, seed: u64) -> Self {
        let profile = |name: &str, f0: [f64; 2], jitter_pct, shimmer_pct, snr_db| VoiceProfile {
            name: name.into(),
            f0_hz: f0,
            jitter_pct,
            shimmer_pct,
            snr_db,
            duration_s: [0.3, 0.4],
        };
        Self {
            n_per_class,
            classes: vec![
                profile("phonotrauma", [110.0, 230.0], 1.0, 4.0, 24.0),
                profile("palsy", [110.0, 230.0], 2.5, 6.0, 8.0),
                profile("functional", [160.0, 280.0], 0.5, 2.0, 30.0),
                profile("neoplasm", [80.0, 160.0], 4.0, 10.0, 15.0),
            ],
            sample_rate: 16000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.classes.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if !names.insert(&c.name) {
                return bad(format!("duplicate class `{}`", c.name));
            }
            if !(c.f0_hz[0] > 0.0 && c.f0_hz[0] <= c.f0_hz[1] && c.f0_hz[1] < self.sample_rate as f64 / 4.0) {
                return bad(format!("class `{}`: f0 range {:?}", c.name, c.f0_hz));
            }
            if !(c.duration_s[0] > 0.0 && c.duration_s[0] <= c.duration_s[1]) {
                return bad(format!("class `{}`: duration range {:?}", c.name, c.duration_s));
            }
            if !(c.jitter_pct >= 0.0 && c.jitter_pct < 50.0 && c.shimmer_pct >= 0.0 && c.shimmer_pct < 100.0) {
                return bad(format!("class `{}`: jitter/shimmer out of range", c.name));
            }
            if !c.snr_db.is_finite() {
                return bad(format!("class `{}`: snr must be finite", c.name));
            }
        }
        Ok(())
    }
}

fn rank_key(seed: u64, class: usize, index: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((class as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.finalize().into()
}

/// 80/10/10 assignment within one class: indices are ordered by a hash of
/// `(seed, class, index)` and the first 80% go to train, the next 10% to
/// validation, the rest to test.
pub fn split_assignment(seed: u64, class: usize, n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| rank_key(seed, class, i));
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Two-pole resonator `y[n] = a x[n] + b y[n-1] + c y[n-2]` with unit DC gain.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, rate: f64) {
    let c = -(-2.0 * PI * bandwidth / rate).exp();
    let b = 2.0 * (-PI * bandwidth / rate).exp() * (2.0 * PI * freq / rate).cos();
    let a = 1.0 - b - c;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = a * *v + b * y1 + c * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Rosenberg glottal pulse shape over one normalised cycle.
fn rosenberg(phase: f64) -> f64 {
    const OPEN: f64 = 0.4;
    const CLOSE: f64 = 0.16;
    if phase < OPEN {
        0.5 * (1.0 - (PI * phase / OPEN).cos())
    } else if phase < OPEN + CLOSE {
        (0.5 * PI * (phase - OPEN) / CLOSE).cos()
    } else {
        0.0
    }
}

/// One vowel-like clip: jittered and shimmered glottal pulses, lip
/// radiation, two formants, then white breath noise at the profile SNR.
pub fn synthesize_clip(profile: &VoiceProfile, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rate = sample_rate as f64;
    let f0 = rng.gen_range(profile.f0_hz[0]..=profile.f0_hz[1]);
    let dur = rng.gen_range(profile.duration_s[0]..=profile.duration_s[1]);
    let n = (dur * rate).round().max(1.0) as usize;
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let mut source = vec![0.0; n + 1];
    let mut start = 0.0;
    while start < n as f64 {
        let period = rate / f0 * (1.0 + profile.jitter_pct / 100.0 * std.sample(rng)).max(0.2);
        let amp = (1.0 + profile.shimmer_pct / 100.0 * std.sample(rng)).max(0.05);
        let first = start.ceil() as usize;
        let last = ((start + period).ceil() as usize).min(n + 1);
        for (i, s) in source.iter_mut().enumerate().take(last).skip(first) {
            *s = amp * rosenberg((i as f64 - start) / period);
        }
        start += period;
    }
    // lip radiation as a first difference
    let mut voiced: Vec<f64> = source.windows(2).map(|w| w[1] - w[0]).collect();
    let f1 = 700.0 * rng.gen_range(0.95..1.05);
    let f2 = 1220.0 * rng.gen_range(0.95..1.05);
    resonate(&mut voiced, f1, 110.0, rate);
    resonate(&mut voiced, f2, 120.0, rate);

    let power = voiced.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_sd = (power / 10f64.powf(profile.snr_db / 10.0)).sqrt();
    let mixed: Vec<f64> = voiced.iter().map(|v| v + noise_sd * std.sample(rng)).collect();

    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = rng.gen_range(0.4..0.8) / peak;
    // soft clip guard keeps every sample inside [-1, 1]
    mixed.iter().map(|v| ((v * gain).tanh()) as f32).collect()
}

fn clip_stream(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    stream(seed, &format!("synth/{class}/{index}"))
}

/// Writes `<class>/<class>_<index>.wav` for every clip and `manifest.jsonl`
/// under `out_dir`, returning the manifest.
pub fn synthesize_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest, DatasetError> {
    spec.validate()?;
    let io = |p: &Path, e| DatasetError::Io {
        path: p.display().to_string(),
        source: e,
    };
    let mut entries = Vec::new();
    for (ci, profile) in spec.classes.iter().enumerate() {
        let dir = out_dir.join(&profile.name);
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let splits = split_assignment(spec.seed, ci, spec.n_per_class);
        for (i, split) in splits.into_iter().enumerate() {
            let mut rng = clip_stream(spec.seed, ci, i);
            let samples = synthesize_clip(profile, spec.sample_rate, &mut rng);
            let rel = format!("{0}/{0}_{1:04}.wav", profile.name, i);
            write_wav_pcm16(&out_dir.join(&rel), &samples, spec.sample_rate)?;
            entries.push(ManifestEntry {
                path: rel,
                label: profile.name.clone(),
                split,
            });
        }
    }
    let manifest = Manifest::from_entries(entries, out_dir.to_path_buf());
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_is_sorted() {
        let text = r#"{"path":"x.wav","label":"b","split":"train"}
{"path":"y.wav","label":"a","split":"val"}
{"path":"z.wav","label":"b","split":"test"}
"#;
        let m = parse_manifest(text, PathBuf::new(), "m").unwrap();
        assert_eq!(m.label_map, BTreeMap::from([("a".to_string(), 0), ("b".to_string(), 1)]));
        assert_eq!(m.entries.len(), 3);
    }

    #[test]
    fn errors_cite_line_numbers() {
        let mut text = String::new();
        for i in 0..6 {
            text += &format!("{{\"path\":\"{i}.wav\",\"label\":\"a\",\"split\":\"train\"}}\n");
        }
        text += "{\"path\":\"2.wav\",\"label\":\"a\",\"split\":\"train\"}\n";
        match parse_manifest(&text, PathBuf::new(), "m") {
            Err(DatasetError::Line { line: 7, message }) => assert!(message.contains("duplicate")),
            other => panic!("{other:?}"),
        }
        let e = parse_manifest("{\"path\":\"a\",\"label\":\"x\",\"split\":\"dev\"}", PathBuf::new(), "m");
        assert!(matches!(e, Err(DatasetError::Line { line: 1, .. })));
        let e = parse_manifest("\n{\"path\":\"a\",\"split\":\"train\"}", PathBuf::new(), "m");
        match e {
            Err(DatasetError::Line { line: 2, message }) => assert!(message.contains("label")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_manifest("", PathBuf::new(), "m"), Err(DatasetError::Empty(_))));
    }

    #[test]
    fn split_proportions_per_class() {
        for n in [10, 37, 100, 101] {
            let s = split_assignment(5, 1, n);
            let count = |k| s.iter().filter(|&&x| x == k).count() as f64;
            assert!((count(Split::Train) - 0.8 * n as f64).abs() <= 1.0);
            assert!((count(Split::Val) - 0.1 * n as f64).abs() <= 1.0);
            assert!((count(Split::Test) - 0.1 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn clips_are_bounded_and_deterministic() {
        let spec = SynthSpec::binary(3, 11);
        for (ci, p) in spec.classes.iter().enumerate() {
            let a = synthesize_clip(p, 16000, &mut clip_stream(11, ci, 0));
            let b = synthesize_clip(p, 16000, &mut clip_stream(11, ci, 0));
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.abs() <= 1.0));
            assert!(a.len() >= 4800 && a.len() <= 6400);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::binary(2, 0);
        s.classes.truncate(1);
        assert!(s.validate().is_err());
        let mut s = SynthSpec::binary(2, 0);
        s.classes[0].f0_hz = [300.0, 100.0];
        assert!(s.validate().is_err());
    }
}
