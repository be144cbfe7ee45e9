//! Joint training of both detector stages, and accuracy evaluation.

use edgegrasp_tensor::{Adam, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{assign_anchor_targets, encode_offsets, AnchorSet};
use super::bins::{angle_to_bin, OrientationBin};
use super::dataset::GraspSample;
use super::detector::{DetectorConfig, DetectorModel};
use super::loss::{gcr_loss, gpn_loss, total_loss};
use super::rect::{box_iou, is_success, GraspRect};
use super::GraspError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Scored anchors per image, at most half positive.
    pub anchor_batch: usize,
    /// Current top proposals reused as stage-two training boxes.
    pub stage_two_proposals: usize,
    /// Perturbed copies of each truth hull added as stage-two boxes.
    pub jitter_per_truth: usize,
    /// Uniformly random stage-two boxes per image.
    pub random_boxes: usize,
    /// Stage-two boxes at or above this hull IoU learn the truth's bin.
    pub positive_iou: f32,
    /// Stage-two boxes below this hull IoU learn the no-grasp class.
    pub negative_iou: f32,
    pub log_every: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            learning_rate: 1e-3,
            seed: 0,
            anchor_batch: 64,
            stage_two_proposals: 24,
            jitter_per_truth: 4,
            random_boxes: 8,
            positive_iou: 0.5,
            negative_iou: 0.35,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorLogEntry {
    pub step: usize,
    pub gpn_loss: f32,
    pub gcr_loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DetectorTrainReport {
    pub steps: usize,
    pub entries: Vec<DetectorLogEntry>,
}

struct StageTwoTargets {
    boxes: Vec<[f32; 4]>,
    bins: Vec<OrientationBin>,
    offsets: Vec<[f32; 4]>,
}

fn jitter<R: Rng + ?Sized>(b: &[f32; 4], rng: &mut R) -> [f32; 4] {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let (cx, cy) = (b[0] + w / 2.0 + rng.random_range(-0.15..0.15) * w, b[1] + h / 2.0 + rng.random_range(-0.15..0.15) * h);
    let (w, h) = (w * rng.random_range(0.8..1.25f32), h * rng.random_range(0.8..1.25f32));
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

fn stage_two_targets(
    candidates: Vec<[f32; 4]>,
    truths: &[GraspRect],
    cfg: &DetectorTrainConfig,
) -> Result<StageTwoTargets, GraspError> {
    let hulls: Vec<[f32; 4]> = truths.iter().map(GraspRect::hull).collect();
    let truth_bins: Vec<OrientationBin> = truths.iter().map(|t| angle_to_bin(t.theta())).collect::<Result<_, _>>()?;
    let mut out = StageTwoTargets {
        boxes: Vec::new(),
        bins: Vec::new(),
        offsets: Vec::new(),
    };
    for b in candidates {
        if b[2] - b[0] < 2.0 || b[3] - b[1] < 2.0 {
            continue;
        }
        let (best, iou) = hulls
            .iter()
            .enumerate()
            .map(|(i, h)| (i, box_iou(&b, h)))
            .fold((0, 0.0f32), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !hulls.is_empty() && iou >= cfg.positive_iou {
            let t = &truths[best];
            out.boxes.push(b);
            out.bins.push(truth_bins[best]);
            out.offsets.push(encode_offsets(&b, (t.x(), t.y(), t.w(), t.h())));
        } else if iou < cfg.negative_iou {
            out.boxes.push(b);
            out.bins.push(OrientationBin::NO_GRASP);
            out.offsets.push([0.0; 4]);
        }
    }
    Ok(out)
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, (h, w): (f32, f32)) -> [f32; 4] {
    let (bw, bh) = (rng.random_range(16.0..64.0f32), rng.random_range(16.0..64.0f32));
    let (x, y) = (rng.random_range(0.0..w - bw), rng.random_range(0.0..h - bh));
    [x, y, x + bw, y + bh]
}

/// Trains from `model_config`'s fresh initialization, one image per step.
pub fn train_detector(
    samples: &[GraspSample],
    model_config: DetectorConfig,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, DetectorTrainReport), GraspError> {
    if samples.is_empty() {
        return Err(GraspError::EmptyDataset);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DetectorModel::new(model_config, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let anchor_sets: Vec<AnchorSet> = samples
        .iter()
        .map(|s| assign_anchor_targets(model.anchors(), &s.truths, &model.config.anchors))
        .collect();
    for s in samples {
        model.check_image(&s.image)?;
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = DetectorTrainReport::default();
    let image_hw = (model.config.input_shape[1] as f32, model.config.input_shape[2] as f32);
    let (mut gpn_acc, mut gcr_acc, mut acc_n) = (0.0f32, 0.0f32, 0usize);
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for &i in &order {
            step += 1;
            let sample = &samples[i];
            let mut tape = Tape::new();
            let p = tape.bind(&model.params, true);
            let shape = sample.image.shape();
            let x = tape.leaf(&sample.image.clone().reshape(vec![1, shape[0], shape[1], shape[2]])?);
            let s1 = model.stage_one(&mut tape, &p, x)?;
            let anchors = anchor_sets[i].subsample(cfg.anchor_batch, &mut rng);
            let gpn = gpn_loss(&mut tape, &anchors, s1.logits, s1.deltas, model.config.lambda, model.config.regression)?;

            let mut boxes: Vec<[f32; 4]> = model
                .proposals(tape.value(s1.logits), tape.value(s1.deltas))
                .into_iter()
                .take(cfg.stage_two_proposals)
                .map(|p| p.bbox)
                .collect();
            for t in &sample.truths {
                let hull = t.hull();
                boxes.push(hull);
                for _ in 0..cfg.jitter_per_truth {
                    boxes.push(jitter(&hull, &mut rng));
                }
            }
            for _ in 0..cfg.random_boxes {
                boxes.push(random_box(&mut rng, image_hw));
            }
            let targets = stage_two_targets(boxes, &sample.truths, cfg)?;
            let loss = if targets.boxes.is_empty() {
                gpn
            } else {
                let (cls, reg) = model.stage_two(&mut tape, &p, s1.features, &targets.boxes)?;
                let gcr = gcr_loss(
                    &mut tape,
                    cls,
                    reg,
                    &targets.bins,
                    &targets.offsets,
                    model.config.lambda2,
                    model.config.regression,
                )?;
                gcr_acc += tape.scalar(gcr);
                total_loss(&mut tape, gpn, gcr)?
            };
            gpn_acc += tape.scalar(gpn);
            acc_n += 1;
            if !tape.scalar(loss).is_finite() {
                return Err(GraspError::NonFinite { step, which: "detector" });
            }
            tape.backward(loss)?;
            tape.write_grads(&p, &mut model.params)?;
            adam.step(&mut model.params)?;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                report.entries.push(DetectorLogEntry {
                    step,
                    gpn_loss: gpn_acc / acc_n as f32,
                    gcr_loss: gcr_acc / acc_n as f32,
                });
                log::info!("detector step {step}: gpn {:.4} gcr {:.4}", gpn_acc / acc_n as f32, gcr_acc / acc_n as f32);
                (gpn_acc, gcr_acc, acc_n) = (0.0, 0.0, 0);
            }
        }
    }
    model.params.zero_grad();
    report.steps = step;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub images: usize,
    pub objects: usize,
    pub emitted: usize,
    pub successful: usize,
    /// Successful over emitted candidates.
    pub candidate_success_rate: f64,
    /// Images whose highest-confidence candidate succeeds.
    pub top1_image_success_rate: f64,
    /// Objects matched by at least one successful candidate.
    pub object_recall: f64,
}

pub fn evaluate(model: &DetectorModel, samples: &[GraspSample]) -> Result<AccuracyReport, GraspError> {
    let (mut emitted, mut successful, mut top1, mut objects, mut found) = (0, 0, 0, 0, 0);
    for s in samples {
        let cands = model.detect(&s.image)?;
        objects += s.truths.len();
        if s.truths.is_empty() {
            emitted += cands.len();
            continue;
        }
        let mut hit = vec![false; s.truths.len()];
        for (k, c) in cands.iter().enumerate() {
            emitted += 1;
            if is_success(&c.rect, &s.truths)? {
                successful += 1;
                if k == 0 {
                    top1 += 1;
                }
            }
            for (j, t) in s.truths.iter().enumerate() {
                if is_success(&c.rect, std::slice::from_ref(t))? {
                    hit[j] = true;
                }
            }
        }
        found += hit.iter().filter(|&&h| h).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AccuracyReport {
        images: samples.len(),
        objects,
        emitted,
        successful,
        candidate_success_rate: ratio(successful, emitted),
        top1_image_success_rate: ratio(top1, samples.len()),
        object_recall: ratio(found, objects),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_two_labels_by_hull_iou() {
        let t = GraspRect::new(50.0, 50.0, 30.0, 20.0, 0.0).unwrap();
        let cfg = DetectorTrainConfig::default();
        let boxes = vec![t.hull(), [100.0, 100.0, 130.0, 130.0], [48.0, 40.0, 78.0, 60.0]];
        let s = stage_two_targets(boxes, &[t], &cfg).unwrap();
        assert_eq!(s.bins.len(), 2);
        assert_eq!(s.bins[0], angle_to_bin(0.0).unwrap());
        assert_eq!(s.offsets[0], [0.0; 4]);
        assert!(s.bins[1].is_no_grasp());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train_detector(&[], DetectorConfig::default(), &DetectorTrainConfig::default()),
            Err(GraspError::EmptyDataset)
        ));
    }
}
