// SPDX-License-Identifier: Apache-2.0

use super::AudioError;

/// Mono waveform with its sample rate and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    pub label: usize,
    pub id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, label: usize, id: impl Into<String>) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::InvalidClip("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !(s.abs() <= 1.0 + 1e-6)) {
            return Err(AudioError::InvalidClip(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self {
            samples,
            sample_rate,
            label,
            id: id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }
}
