// SPDX-License-Identifier: Apache-2.0

//! Run configuration: one TOML document with a section per module.
//!
//! ```toml
//! seed = 7
//! [paths]
//! manifest = "corpus/manifest.jsonl"
//! out_dir = "runs/demo"
//! [train]
//! batch_size = 16
//! ```
//!
//! Dotted keys (`train.batch_size = 16`) are equivalent. Unknown keys are
//! rejected with their full dotted path. Relative paths resolve against the
//! directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::MfccConfig;
use crate::error::FuseError;
use crate::metrics::Averaging;
use crate::model::{AcousticConfig, FusionConfig, HeadConfig, ModelKind, Network, TdnnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MultiStage,
    EndToEnd,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MultiStage => "multi_stage",
            Self::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "multi_stage" => Ok(Self::MultiStage),
            "end_to_end" => Ok(Self::EndToEnd),
            _ => Err(format!("unknown strategy `{s}` (multi_stage|end_to_end)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_end_to_end: usize,
    pub lr_tdnn_stage1: f64,
    pub lr_acoustic_stage1: f64,
    pub lr_stage2: f64,
    pub lr_end_to_end: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs_stage1: 30,
            epochs_stage2: 20,
            epochs_end_to_end: 30,
            lr_tdnn_stage1: 1e-5,
            lr_acoustic_stage1: 1e-4,
            lr_stage2: 1e-5,
            lr_end_to_end: 1e-4,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: String,
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: "manifest.jsonl".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub averaging: Averaging,
    /// Clips per inference graph; has no effect on results.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            averaging: Averaging::Macro,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub mfcc: MfccConfig,
    pub tdnn: TdnnConfig,
    pub acoustic: AcousticConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Directory relative paths resolve against; not serialised.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            mfcc: MfccConfig::default(),
            tdnn: TdnnConfig::default(),
            acoustic: AcousticConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

fn unknown_keys(user: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(u), toml::Value::Table(k)) = (user, known) else {
        return;
    };
    for (key, v) in u {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, &path, out),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, FuseError> {
        let user: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| FuseError::Config(format!("invalid TOML: {}", e.message())))?;
        let known = toml::Value::try_from(RunConfig::default()).expect("default config serialises");
        let mut unknown = Vec::new();
        unknown_keys(&user, &known, "", &mut unknown);
        if let Some(key) = unknown.first() {
            return Err(FuseError::Config(format!("unknown key `{key}`")));
        }
        let mut cfg: RunConfig = user
            .try_into()
            .map_err(|e: toml::de::Error| FuseError::Config(e.message().trim().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, FuseError> {
        let text = std::fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn validate(&self) -> Result<(), FuseError> {
        let cfg = |m: String| FuseError::Config(m);
        self.mfcc.validate(16000).map_err(|e| cfg(format!("mfcc: {e}")))?;
        self.tdnn.validate().map_err(cfg)?;
        self.acoustic.validate().map_err(cfg)?;
        if self.tdnn.in_features != self.mfcc.n_mfcc {
            return Err(cfg(format!(
                "tdnn.in_features ({}) must equal mfcc.n_mfcc ({})",
                self.tdnn.in_features, self.mfcc.n_mfcc
            )));
        }
        if self.fusion.dim == 0 {
            return Err(cfg("fusion.dim must be positive".into()));
        }
        if self.head.hidden == 0 || self.head.n_classes == 1 {
            return Err(cfg("head.hidden must be positive and head.n_classes 0 (auto) or >= 2".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(cfg("train.batch_size must be >= 1".into()));
        }
        for (k, v) in [
            ("train.lr_tdnn_stage1", t.lr_tdnn_stage1),
            ("train.lr_acoustic_stage1", t.lr_acoustic_stage1),
            ("train.lr_stage2", t.lr_stage2),
            ("train.lr_end_to_end", t.lr_end_to_end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(cfg(format!("train.dropout must be in [0, 1), got {}", t.dropout)));
        }
        if self.eval.batch_size == 0 {
            return Err(cfg("eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical TOML of every resolved value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.paths.manifest)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.out_dir)
    }

    pub fn network(&self, kind: ModelKind, n_classes: usize) -> Network {
        let mut head = self.head.clone();
        if head.n_classes == 0 {
            head.n_classes = n_classes;
        }
        Network {
            kind,
            tdnn: self.tdnn.clone(),
            acoustic: self.acoustic.clone(),
            fusion: self.fusion.clone(),
            head,
        }
    }
}
