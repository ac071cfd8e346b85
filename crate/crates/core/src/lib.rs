// SPDX-License-Identifier: Apache-2.0

//! Dual-path voice pathology detection: an MFCC time-delay encoder and a
//! raw-waveform transformer encoder joined by frame-level attentive fusion,
//! trained in two stages.

pub mod ablation;
pub mod audio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod train;

pub use config::RunConfig;
pub use corpus::Corpus;
pub use error::{FuseError, Result};
