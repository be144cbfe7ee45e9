//! Anchor grid, anchor-to-truth matching, box offsets and NMS.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rect::{box_iou, GraspRect};

/// Caps `exp` of a predicted log-scale offset.
pub const MAX_LOG_SCALE: f32 = 4.135; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Square-root areas in pixels.
    pub sizes: [f32; 3],
    /// Height over width.
    pub ratios: [f32; 3],
    pub positive_iou: f32,
    pub negative_iou: f32,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: [24.0, 40.0, 64.0],
            ratios: [0.5, 1.0, 2.0],
            positive_iou: 0.5,
            negative_iou: 0.3,
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// Anchor boxes `[x1, y1, x2, y2]` centred on each cell of an `fh×fw` grid
/// laid over an `image_h×image_w` image. Index is `(row·fw + col)·A + a`.
pub fn generate_anchors(cfg: &AnchorConfig, (fh, fw): (usize, usize), (image_h, image_w): (usize, usize)) -> Vec<[f32; 4]> {
    let (sy, sx) = (image_h as f32 / fh as f32, image_w as f32 / fw as f32);
    let mut out = Vec::with_capacity(fh * fw * cfg.per_cell());
    for i in 0..fh {
        for j in 0..fw {
            let (cx, cy) = ((j as f32 + 0.5) * sx, (i as f32 + 0.5) * sy);
            for &s in &cfg.sizes {
                for &r in &cfg.ratios {
                    let (w, h) = (s / r.sqrt(), s * r.sqrt());
                    out.push([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
                }
            }
        }
    }
    out
}

fn centre_size(b: &[f32; 4]) -> (f32, f32, f32, f32) {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    (b[0] + w / 2.0, b[1] + h / 2.0, w, h)
}

/// Offsets `(dx/w_a, dy/h_a, ln(w/w_a), ln(h/h_a))` of a target centre and
/// extent relative to a reference box.
pub fn encode_offsets(reference: &[f32; 4], (cx, cy, w, h): (f32, f32, f32, f32)) -> [f32; 4] {
    let (ax, ay, aw, ah) = centre_size(reference);
    [(cx - ax) / aw, (cy - ay) / ah, (w / aw).ln(), (h / ah).ln()]
}

/// Inverse of [`encode_offsets`]: `(cx, cy, w, h)`.
pub fn decode_offsets(reference: &[f32; 4], t: &[f32]) -> (f32, f32, f32, f32) {
    let (ax, ay, aw, ah) = centre_size(reference);
    (
        ax + t[0] * aw,
        ay + t[1] * ah,
        aw * t[2].min(MAX_LOG_SCALE).exp(),
        ah * t[3].min(MAX_LOG_SCALE).exp(),
    )
}

pub fn box_offsets(reference: &[f32; 4], target: &[f32; 4]) -> [f32; 4] {
    encode_offsets(reference, centre_size(target))
}

pub fn apply_box_offsets(reference: &[f32; 4], t: &[f32]) -> [f32; 4] {
    let (cx, cy, w, h) = decode_offsets(reference, t);
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

impl AnchorLabel {
    /// Graspability target `p*`, or `None` when the anchor is not scored.
    pub fn target(self) -> Option<usize> {
        match self {
            AnchorLabel::Positive => Some(1),
            AnchorLabel::Negative => Some(0),
            AnchorLabel::Ignored => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<[f32; 4]>,
    pub labels: Vec<AnchorLabel>,
    /// Offset targets `t*`; zero for non-positive anchors.
    pub targets: Vec<[f32; 4]>,
    /// Truth matched by each positive anchor.
    pub matched: Vec<Option<usize>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Keeps at most `total` scored anchors, at most half of them positive,
    /// marking the rest ignored.
    pub fn subsample<R: Rng + ?Sized>(&self, total: usize, rng: &mut R) -> AnchorSet {
        let mut pos: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == AnchorLabel::Positive).collect();
        let mut neg: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == AnchorLabel::Negative).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        pos.truncate(total / 2);
        neg.truncate(total - pos.len());
        let mut out = self.clone();
        out.labels.iter_mut().for_each(|l| *l = AnchorLabel::Ignored);
        for &i in pos.iter().chain(&neg) {
            out.labels[i] = self.labels[i];
        }
        for i in 0..out.len() {
            if out.labels[i] != AnchorLabel::Positive {
                out.targets[i] = [0.0; 4];
                out.matched[i] = None;
            }
        }
        out
    }
}

/// Labels anchors against the axis-aligned hulls of `truths`.
///
/// Positive: IoU ≥ `positive_iou` with some hull, or the first anchor of
/// maximal (non-zero) IoU for some truth. Negative: best IoU below
/// `negative_iou`. Everything else is ignored.
pub fn assign_anchor_targets(anchors: &[[f32; 4]], truths: &[GraspRect], cfg: &AnchorConfig) -> AnchorSet {
    let hulls: Vec<[f32; 4]> = truths.iter().map(GraspRect::hull).collect();
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched = vec![None; n];
    let mut best_iou = vec![0.0f32; n];
    for (i, a) in anchors.iter().enumerate() {
        for (t, h) in hulls.iter().enumerate() {
            let iou = box_iou(a, h);
            if iou > best_iou[i] {
                best_iou[i] = iou;
                matched[i] = Some(t);
            }
        }
        labels[i] = if best_iou[i] >= cfg.positive_iou {
            AnchorLabel::Positive
        } else if best_iou[i] < cfg.negative_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }
    for (t, h) in hulls.iter().enumerate() {
        let mut arg = None;
        let mut max = 0.0f32;
        for (i, a) in anchors.iter().enumerate() {
            let iou = box_iou(a, h);
            if iou > max {
                max = iou;
                arg = Some(i);
            }
        }
        if let Some(i) = arg {
            if labels[i] != AnchorLabel::Positive {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(t);
            }
        }
    }
    let targets = (0..n)
        .map(|i| match (labels[i], matched[i]) {
            (AnchorLabel::Positive, Some(t)) => box_offsets(&anchors[i], &hulls[t]),
            _ => [0.0; 4],
        })
        .collect();
    for i in 0..n {
        if labels[i] != AnchorLabel::Positive {
            matched[i] = None;
        }
    }
    AnchorSet {
        boxes: anchors.to_vec(),
        labels,
        targets,
        matched,
    }
}

/// Greedy non-maximum suppression. Returns kept indices, best first; ties in
/// score go to the lower index.
pub fn nms(boxes: &[[f32; 4]], scores: &[f32], iou_threshold: f32, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= limit {
            break;
        }
        if keep.iter().all(|&k| box_iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
