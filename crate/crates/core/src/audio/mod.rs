// SPDX-License-Identifier: Apache-2.0

//! Audio ingestion and MFCC front end.

mod clip;
mod mfcc;
mod resample;
mod wav;

pub use clip::AudioClip;
pub use mfcc::{
    cmvn, dct_matrix, hz_to_mel, mel_filterbank, mel_to_hz, mfcc, read_feature_dump, write_feature_dump,
    FeatureMatrix, MfccConfig,
};
pub use resample::resample;
pub use wav::{load_wav, write_wav_pcm16};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: file not found")]
    NotFound { path: String },

    #[error("{path}: malformed RIFF header: {field} {detail}")]
    MalformedHeader {
        path: String,
        field: &'static str,
        detail: String,
    },

    #[error("{path}: truncated file: data chunk declares {declared} bytes, {available} available")]
    Truncated {
        path: String,
        declared: usize,
        available: usize,
    },

    #[error("{path}: unsupported encoding: {field} = {value}")]
    Unsupported {
        path: String,
        field: &'static str,
        value: u32,
    },

    #[error("invalid audio clip: {0}")]
    InvalidClip(String),

    #[error("invalid MFCC configuration: {0}")]
    InvalidConfig(String),

    #[error("clip of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },

    #[error("feature dump: {0}")]
    BadDump(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
