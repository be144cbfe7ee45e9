//! Proposal-stage and configuration-stage losses.

use edgegrasp_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use super::anchors::AnchorSet;
use super::bins::{OrientationBin, NUM_CLASSES};
use super::GraspError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    /// Quadratic below 1, linear above.
    #[default]
    SmoothL1,
    L1,
}

impl RegressionLoss {
    pub fn beta(self) -> f32 {
        match self {
            RegressionLoss::SmoothL1 => 1.0,
            RegressionLoss::L1 => 0.0,
        }
    }
}

fn expect_shape(tape: &Tape, v: Var, what: &'static str, expected: [usize; 2]) -> Result<(), GraspError> {
    if tape.shape(v) != expected {
        return Err(GraspError::Arity {
            what,
            expected: expected.to_vec(),
            actual: tape.shape(v).to_vec(),
        });
    }
    Ok(())
}

/// `Σ CE(p_i, p*_i) + λ Σ p*_i · reg(t_i − t*_i)` over scored anchors.
///
/// `logits` is `A×2` (class 1 = graspable) and `deltas` is `A×4`.
pub fn gpn_loss(
    tape: &mut Tape,
    anchors: &AnchorSet,
    logits: Var,
    deltas: Var,
    lambda: f32,
    regression: RegressionLoss,
) -> Result<Var, GraspError> {
    let n = anchors.len();
    expect_shape(tape, logits, "proposal logits", [n, 2])?;
    expect_shape(tape, deltas, "proposal deltas", [n, 4])?;
    let targets: Vec<Option<usize>> = anchors.labels.iter().map(|l| l.target()).collect();
    let ce = tape.cross_entropy_rows(logits, &targets)?;
    let weights: Vec<f32> = targets.iter().map(|t| if *t == Some(1) { 1.0 } else { 0.0 }).collect();
    let flat: Vec<f32> = anchors.targets.iter().flatten().copied().collect();
    let reg = tape.smooth_l1_rows(deltas, &flat, &weights, regression.beta())?;
    let reg = tape.scale(reg, lambda);
    Ok(tape.add(ce, reg)?)
}

/// `Σ CE(ρ, c*) + λ2 Σ_{c*≠0} reg(β_{c*} − β*)` over proposals.
///
/// `logits` is `P×21`; `refinements` is `P×84`, four values per class.
/// `target_offsets` holds `β*` per proposal and is ignored for no-grasp rows.
pub fn gcr_loss(
    tape: &mut Tape,
    logits: Var,
    refinements: Var,
    truth_bins: &[OrientationBin],
    target_offsets: &[[f32; 4]],
    lambda2: f32,
    regression: RegressionLoss,
) -> Result<Var, GraspError> {
    let p = truth_bins.len();
    if target_offsets.len() != p {
        return Err(GraspError::Arity {
            what: "refinement targets",
            expected: vec![p, 4],
            actual: vec![target_offsets.len(), 4],
        });
    }
    expect_shape(tape, logits, "configuration logits", [p, NUM_CLASSES])?;
    expect_shape(tape, refinements, "refinements", [p, NUM_CLASSES * 4])?;
    let targets: Vec<Option<usize>> = truth_bins.iter().map(|b| Some(b.index())).collect();
    let ce = tape.cross_entropy_rows(logits, &targets)?;
    let index: Vec<usize> = truth_bins
        .iter()
        .enumerate()
        .flat_map(|(row, b)| (0..4).map(move |d| row * NUM_CLASSES * 4 + b.index() * 4 + d))
        .collect();
    let picked = tape.gather(refinements, index, vec![p, 4])?;
    let weights: Vec<f32> = truth_bins.iter().map(|b| if b.is_no_grasp() { 0.0 } else { 1.0 }).collect();
    let flat: Vec<f32> = target_offsets.iter().flatten().copied().collect();
    let reg = tape.smooth_l1_rows(picked, &flat, &weights, regression.beta())?;
    let reg = tape.scale(reg, lambda2);
    Ok(tape.add(ce, reg)?)
}

pub fn total_loss(tape: &mut Tape, gpn: Var, gcr: Var) -> Result<Var, GraspError> {
    Ok(tape.add(gpn, gcr)?)
}
