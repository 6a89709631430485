//! Training harness, synthetic benchmark, file formats and command-line
//! front end for entropic-OT hard-negative sampling.
//!
//! The numerical core lives in [`hardneg_core`] and is re-exported as
//! [`core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub use hardneg_core as core;

pub mod config;
pub mod degeneracy;
pub mod diagnostics;
pub mod io;
pub mod readout;
pub mod synth;
pub mod train;

pub use config::{RunConfig, TrainConfig};
pub use train::{train, Evaluator, MetricsRecord, TrainState};

use hardneg_core::{EncoderError, ObjectiveError, SamplerError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Format(_) | HarnessError::Io(_) => 1,
        }
    }
}

impl From<EncoderError> for HarnessError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::InvalidArchitecture(_) | EncoderError::DimensionMismatch(_) => {
                HarnessError::Config(e.to_string())
            }
            _ => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for HarnessError {
    fn from(e: ObjectiveError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<SamplerError> for HarnessError {
    fn from(e: SamplerError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}
