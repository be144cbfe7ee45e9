//! Grasp rectangles, orientation bins, matching, losses and the detector.

pub mod anchors;
pub mod bins;
pub mod dataset;
pub mod detector;
pub mod loss;
pub mod rect;
pub mod train;

pub use anchors::{assign_anchor_targets, AnchorConfig, AnchorLabel, AnchorSet};
pub use bins::{angle_to_bin, bin_to_angle, OrientationBin, NUM_CLASSES, ORIENTATION_BINS};
pub use dataset::{load_dataset, parse_rect_annotations, GraspSample};
pub use detector::{DetectorConfig, DetectorModel};
pub use loss::{gcr_loss, gpn_loss, total_loss, RegressionLoss};
pub use rect::{is_success, rect_iou, GraspRect};
pub use train::{evaluate, train_detector, AccuracyReport, DetectorTrainConfig};

use edgegrasp_tensor::TensorError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::imageio::ImageIoError;

#[derive(Debug, Error)]
pub enum GraspError {
    #[error("invalid grasp rectangle: {0}")]
    InvalidRect(String),
    #[error("success test needs at least one ground-truth rectangle")]
    EmptyTruths,
    #[error("angle is not finite")]
    NonFiniteAngle,
    #[error("bin index {0} outside 0..=20")]
    BinOutOfRange(usize),
    #[error("the no-grasp bin has no angle")]
    NoGraspAngle,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Arity {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("image shape {actual:?} does not match {expected:?}")]
    ImageShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite {which} loss at step {step}")]
    NonFinite { step: usize, which: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A detected grasp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspCandidate {
    pub rect: GraspRect,
    pub bin: OrientationBin,
    /// Softmax probability of `bin` over all 21 classes.
    pub confidence: f32,
    /// Anchor that produced the proposal; breaks confidence ties.
    pub anchor_index: usize,
}

/// Exported form of a [`GraspCandidate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub theta_deg: f32,
    pub bin: u8,
    pub confidence: f32,
}

impl From<&GraspCandidate> for CandidateRecord {
    fn from(c: &GraspCandidate) -> Self {
        Self {
            x: c.rect.x(),
            y: c.rect.y(),
            w: c.rect.w(),
            h: c.rect.h(),
            theta_deg: c.rect.theta(),
            bin: c.bin.into(),
            confidence: c.confidence,
        }
    }
}
