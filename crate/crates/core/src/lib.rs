//! Streaming, language-guided 3D hand forecasting.
//!
//! A per-frame autoregressive model reads a static instruction, the current
//! video frame and the current hand states, refines the visual and hand
//! tokens against a fixed-capacity FIFO memory of past frames whose
//! attention is biased toward hand regions, and decodes the next-frame hand
//! states with a set-prediction decoder.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod handstate;
pub mod matchloss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod stream;
pub mod train;

pub use config::{Config, LrSchedule, Modalities, RoiBias};
pub use handstate::{BBox, HandPose, HandState, HandType, JointSet, Trajectory3D};
pub use model::Model;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Hand(#[from] handstate::HandError),
    #[error(transparent)]
    Format(#[from] data::FormatError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss in {term} term at step {step}")]
    NonFiniteLoss { term: String, step: usize },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Format(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Hand(_) => 2,
            Error::Numerics(_) | Error::NonFiniteLoss { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
