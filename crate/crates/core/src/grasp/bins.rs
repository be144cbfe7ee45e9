use serde::{Deserialize, Serialize};

use super::rect::canonical_angle;
use super::GraspError;

pub const ORIENTATION_BINS: usize = 20;
/// Orientation bins plus the no-grasp class.
pub const NUM_CLASSES: usize = ORIENTATION_BINS + 1;
pub const BIN_WIDTH: f32 = 180.0 / ORIENTATION_BINS as f32;

/// Class index: 0 is "no grasp", `k ∈ 1..=20` covers
/// `[−90 + (k−1)·9, −90 + k·9)` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct OrientationBin(u8);

impl OrientationBin {
    pub const NO_GRASP: OrientationBin = OrientationBin(0);

    pub fn new(index: usize) -> Result<Self, GraspError> {
        if index >= NUM_CLASSES {
            return Err(GraspError::BinOutOfRange(index));
        }
        Ok(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_no_grasp(self) -> bool {
        self.0 == 0
    }
}

impl TryFrom<u8> for OrientationBin {
    type Error = GraspError;

    fn try_from(v: u8) -> Result<Self, GraspError> {
        OrientationBin::new(v as usize)
    }
}

impl From<OrientationBin> for u8 {
    fn from(b: OrientationBin) -> u8 {
        b.0
    }
}

pub fn angle_to_bin(theta: f32) -> Result<OrientationBin, GraspError> {
    if !theta.is_finite() {
        return Err(GraspError::NonFiniteAngle);
    }
    let c = canonical_angle(theta);
    let k = ((c + 90.0) / BIN_WIDTH).floor() as i64 + 1;
    Ok(OrientationBin(k.clamp(1, ORIENTATION_BINS as i64) as u8))
}

/// Centre of the bin's angular interval.
pub fn bin_to_angle(bin: OrientationBin) -> Result<f32, GraspError> {
    if bin.is_no_grasp() {
        return Err(GraspError::NoGraspAngle);
    }
    Ok(-90.0 + (bin.0 as f32 - 0.5) * BIN_WIDTH)
}
