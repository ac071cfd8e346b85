// SPDX-License-Identifier: Apache-2.0

//! A manifest's clips loaded, resampled to 16 kHz and featurised once.

use fusepath_autodiff::Tensor;

use crate::audio::{cmvn, load_wav, mfcc, resample, MfccConfig};
use crate::dataset::{Manifest, Split};
use crate::error::{FuseError, Result};
use crate::model::ClipInput;

pub const MODEL_RATE: u32 = 16000;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClip {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// CMVN-normalised MFCC, `frames x features` row-major.
    pub mfcc: Vec<f32>,
    pub frames: usize,
    pub features: usize,
    /// 16 kHz waveform.
    pub wave: Vec<f32>,
}

impl PreparedClip {
    pub fn input(&self) -> ClipInput<f32> {
        ClipInput {
            mfcc: Tensor::new(&[self.frames, self.features], self.mfcc.clone()).expect("feature shape"),
            wave: Tensor::new(&[1, self.wave.len()], self.wave.clone()).expect("wave shape"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Class names indexed by label.
    pub labels: Vec<String>,
    pub clips: Vec<PreparedClip>,
}

impl Corpus {
    pub fn load(manifest: &Manifest, cfg: &MfccConfig) -> Result<Self> {
        let labels: Vec<String> = manifest.label_map.keys().cloned().collect();
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let label = manifest.class_of(e);
            let raw = load_wav(&manifest.resolve(e))?;
            let clip = resample(&raw, MODEL_RATE)?.with_label(label);
            let feat = cmvn(&mfcc(&clip, cfg)?);
            clips.push(PreparedClip {
                id: e.path.clone(),
                label,
                split: e.split,
                mfcc: feat.data().iter().map(|&v| v as f32).collect(),
                frames: feat.frames(),
                features: feat.features(),
                wave: clip.samples().to_vec(),
            });
        }
        Ok(Self { labels, clips })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    /// Clip indices of `split` in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].split == split).collect()
    }

    pub fn require_split(&self, split: Split) -> Result<Vec<usize>> {
        let idx = self.split_indices(split);
        if idx.is_empty() {
            return Err(FuseError::Data(format!("split `{split}` is empty")));
        }
        Ok(idx)
    }
}
