//! The per-patch detector slot.
//!
//! Every detector maps one patch to a list of patch-local detections. Two
//! implementations ship: a deterministic anomaly detector ([`baseline`]) and
//! an adapter that drives an external model over line-delimited JSON
//! ([`external`]).

pub mod baseline;
pub mod external;

use thiserror::Error;

use crate::model::{Detection, ImageBuffer};

pub use baseline::{baseline_detect, label_components, BaselineDetector, BaselineParams, Component};
pub use external::{BatchError, ExternalDetector, ExternalSpec, DEFAULT_TIMEOUT_MS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid detector parameters: {0}")]
    Params(String),
    #[error("failed to start detector `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error("request {id} timed out after {timeout_ms} ms")]
    Timeout { id: u64, timeout_ms: u64 },
    #[error("detector process exited before answering request {id}")]
    ProcessExited { id: u64 },
    #[error("protocol error: {reason}: {line}")]
    Protocol { line: String, reason: String },
    #[error("detector reported failure for request {id}: {message}")]
    Remote { id: u64, message: String },
    #[error("i/o error talking to detector: {0}")]
    Io(String),
}

/// Contract shared by every detector: boxes are patch-local, clipped to the
/// patch, and scored in `[0, 1]`. Implementations must be callable from
/// several worker threads at once.
pub trait Detector: Send + Sync {
    fn detect(&self, patch: &ImageBuffer) -> Result<Vec<Detection>, DetectError>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectorSpec {
    Baseline(BaselineParams),
    External(ExternalSpec),
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Baseline(BaselineParams::default())
    }
}

impl DetectorSpec {
    pub fn build(&self) -> Result<Box<dyn Detector>, DetectError> {
        Ok(match self {
            DetectorSpec::Baseline(params) => Box::new(BaselineDetector::new(*params)?),
            DetectorSpec::External(spec) => Box::new(ExternalDetector::spawn(spec)?),
        })
    }
}
