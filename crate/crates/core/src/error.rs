// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use fusepath_autodiff::AutodiffError;
use thiserror::Error;

use crate::audio::AudioError;
use crate::dataset::DatasetError;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] AutodiffError),
    #[error("{0}")]
    Data(String),
}

impl FuseError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "CONFIG",
            Self::Io { .. } => "IO",
            Self::Audio(_) => "AUDIO",
            Self::Dataset(_) => "DATASET",
            Self::Model(AutodiffError::Checkpoint(_) | AutodiffError::Io(_)) => "CHECKPOINT",
            Self::Model(AutodiffError::ParameterShape { .. } | AutodiffError::UnknownParameter(_)) => "PARAMETERS",
            Self::Model(_) => "MODEL",
            Self::Data(_) => "DATA",
        }
    }
}

pub type Result<T> = std::result::Result<T, FuseError>;
