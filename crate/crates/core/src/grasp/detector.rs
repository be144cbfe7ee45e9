//! Two-stage grasp detector: anchor proposals on a coarse feature map, then
//! per-proposal orientation classification and rectangle refinement.

use std::path::Path;

use edgegrasp_tensor::{Binding, ConvGeom, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{apply_box_offsets, decode_offsets, generate_anchors, nms, AnchorConfig};
use super::bins::{bin_to_angle, OrientationBin, NUM_CLASSES};
use super::loss::RegressionLoss;
use super::rect::GraspRect;
use super::{GraspCandidate, GraspError};
use crate::checkpoint::{self, CheckpointError};
use crate::nn::{Conv, Linear, LEAKY_SLOPE};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GWD1";
pub const CHECKPOINT_VERSION: u16 = 1;
const CONFIG_WORDS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_shape: [usize; 3],
    /// Output channels of the four stride-2 backbone convolutions.
    pub backbone_channels: [usize; 4],
    pub head_channels: usize,
    pub hidden: usize,
    pub crop_size: usize,
    pub anchors: AnchorConfig,
    pub pre_nms_top: usize,
    pub top_n: usize,
    pub nms_iou: f32,
    /// Proposals narrower or shorter than this many pixels are dropped.
    pub min_box: f32,
    pub lambda: f32,
    pub lambda2: f32,
    pub regression: RegressionLoss,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 210, 150],
            backbone_channels: [8, 16, 32, 32],
            head_channels: 32,
            hidden: 128,
            crop_size: 7,
            anchors: AnchorConfig::default(),
            pre_nms_top: 300,
            top_n: 32,
            nms_iou: 0.5,
            min_box: 4.0,
            lambda: 1.0,
            lambda2: 1.0,
            regression: RegressionLoss::SmoothL1,
        }
    }
}

impl DetectorConfig {
    /// Extents of the backbone's output feature map.
    pub fn feature_size(&self) -> Result<(usize, usize), GraspError> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in 0..4 {
            let g = ConvGeom::new(1, h, w, 4, 2, 1)
                .ok_or_else(|| GraspError::InvalidConfig(format!("input {:?} too small for the backbone", self.input_shape)))?;
            (h, w) = (g.out_height, g.out_width);
        }
        Ok((h, w))
    }

    fn validate(&self) -> Result<(), GraspError> {
        let positive = self.backbone_channels.iter().chain([&self.head_channels, &self.hidden, &self.crop_size, &self.top_n, &self.pre_nms_top]);
        if positive.clone().any(|&v| v == 0) || self.input_shape[0] == 0 {
            return Err(GraspError::InvalidConfig("channel counts, sizes and limits must be positive".into()));
        }
        let floats = [self.nms_iou, self.min_box, self.lambda, self.lambda2];
        if floats.iter().chain(&self.anchors.sizes).chain(&self.anchors.ratios).any(|v| !v.is_finite() || *v < 0.0)
            || self.anchors.sizes.iter().chain(&self.anchors.ratios).any(|&v| v <= 0.0)
        {
            return Err(GraspError::InvalidConfig("anchor menu and loss weights must be finite and positive".into()));
        }
        self.feature_size().map(|_| ())
    }

    fn to_words(&self) -> [u32; CONFIG_WORDS] {
        let b = f32::to_bits;
        let a = &self.anchors;
        let u = |v: usize| v as u32;
        [
            u(self.input_shape[0]),
            u(self.input_shape[1]),
            u(self.input_shape[2]),
            u(self.backbone_channels[0]),
            u(self.backbone_channels[1]),
            u(self.backbone_channels[2]),
            u(self.backbone_channels[3]),
            u(self.head_channels),
            u(self.hidden),
            u(self.crop_size),
            b(a.sizes[0]),
            b(a.sizes[1]),
            b(a.sizes[2]),
            b(a.ratios[0]),
            b(a.ratios[1]),
            b(a.ratios[2]),
            b(a.positive_iou),
            b(a.negative_iou),
            u(self.pre_nms_top),
            u(self.top_n),
            b(self.nms_iou),
            b(self.min_box),
            b(self.lambda),
            b(self.lambda2),
            match self.regression {
                RegressionLoss::SmoothL1 => 0,
                RegressionLoss::L1 => 1,
            },
        ]
    }

    fn from_words(w: &[u32]) -> Result<Self, CheckpointError> {
        let u = |i: usize| w[i] as usize;
        let f = |i: usize| f32::from_bits(w[i]);
        Ok(Self {
            input_shape: [u(0), u(1), u(2)],
            backbone_channels: [u(3), u(4), u(5), u(6)],
            head_channels: u(7),
            hidden: u(8),
            crop_size: u(9),
            anchors: AnchorConfig {
                sizes: [f(10), f(11), f(12)],
                ratios: [f(13), f(14), f(15)],
                positive_iou: f(16),
                negative_iou: f(17),
            },
            pre_nms_top: u(18),
            top_n: u(19),
            nms_iou: f(20),
            min_box: f(21),
            lambda: f(22),
            lambda2: f(23),
            regression: match w[24] {
                0 => RegressionLoss::SmoothL1,
                1 => RegressionLoss::L1,
                other => return Err(CheckpointError::InvalidConfig(format!("regression kind {other}"))),
            },
        })
    }
}

/// A stage-one region hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: [f32; 4],
    pub score: f32,
    pub anchor_index: usize,
}

/// Tape handles for the stage-one outputs.
#[derive(Debug, Clone, Copy)]
pub struct StageOne {
    pub features: Var,
    /// `A×2`.
    pub logits: Var,
    /// `A×4`.
    pub deltas: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParamStore,
    backbone: Vec<Conv>,
    head: Conv,
    head_cls: Conv,
    head_reg: Conv,
    fc: Linear,
    cls: Linear,
    reg: Linear,
    feature_hw: (usize, usize),
    anchors: Vec<[f32; 4]>,
}

fn he_std(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

impl DetectorModel {
    /// He-normal hidden layers; output heads drawn with std 0.01.
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self, GraspError> {
        config.validate()?;
        let feature_hw = config.feature_size()?;
        let mut p = ParamStore::new();
        let mut backbone = Vec::new();
        let mut cin = config.input_shape[0];
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            backbone.push(Conv::new(&mut p, &format!("backbone{i}"), (cin, c, 4), 2, 1, he_std(cin * 16), rng));
            cin = c;
        }
        let a = config.anchors.per_cell();
        let hc = config.head_channels;
        let head = Conv::new(&mut p, "proposal.conv", (cin, hc, 3), 1, 1, he_std(cin * 9), rng);
        let head_cls = Conv::new(&mut p, "proposal.cls", (hc, 2 * a, 1), 1, 0, 0.01, rng);
        let head_reg = Conv::new(&mut p, "proposal.reg", (hc, 4 * a, 1), 1, 0, 0.01, rng);
        let crop_len = cin * config.crop_size * config.crop_size;
        let fc = Linear::new(&mut p, "config.fc", crop_len, config.hidden, he_std(crop_len), rng);
        let cls = Linear::new(&mut p, "config.cls", config.hidden, NUM_CLASSES, 0.01, rng);
        let reg = Linear::new(&mut p, "config.reg", config.hidden, 4 * NUM_CLASSES, 0.01, rng);
        let anchors = generate_anchors(&config.anchors, feature_hw, (config.input_shape[1], config.input_shape[2]));
        Ok(Self {
            config,
            params: p,
            backbone,
            head,
            head_cls,
            head_reg,
            fc,
            cls,
            reg,
            feature_hw,
            anchors,
        })
    }

    pub fn anchors(&self) -> &[[f32; 4]] {
        &self.anchors
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.feature_hw
    }

    pub fn check_image(&self, image: &Tensor) -> Result<(), GraspError> {
        if image.shape() != self.config.input_shape {
            return Err(GraspError::ImageShape {
                expected: self.config.input_shape.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        if image.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(GraspError::InvalidConfig("image values must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    /// `image` is `1×C×H×W`.
    pub fn stage_one(&self, tape: &mut Tape, p: &Binding, image: Var) -> Result<StageOne, GraspError> {
        let mut h = image;
        for conv in &self.backbone {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let features = h;
        let t = self.head.forward(tape, p, features)?;
        let t = tape.leaky_relu(t, LEAKY_SLOPE);
        let cls = self.head_cls.forward(tape, p, t)?;
        let reg = self.head_reg.forward(tape, p, t)?;
        let logits = self.anchor_rows(tape, cls, 2)?;
        let deltas = self.anchor_rows(tape, reg, 4)?;
        Ok(StageOne {
            features,
            logits,
            deltas,
        })
    }

    /// Reorders a `1×(A·k)×fh×fw` head output into `(fh·fw·A)×k` rows.
    fn anchor_rows(&self, tape: &mut Tape, x: Var, k: usize) -> Result<Var, GraspError> {
        let (fh, fw) = self.feature_hw;
        let a = self.config.anchors.per_cell();
        let plane = fh * fw;
        let mut index = Vec::with_capacity(plane * a * k);
        for cell in 0..plane {
            for anchor in 0..a {
                for c in 0..k {
                    index.push((anchor * k + c) * plane + cell);
                }
            }
        }
        Ok(tape.gather(x, index, vec![plane * a, k])?)
    }

    /// Scores and decodes every anchor, then keeps the top-N after NMS.
    pub fn proposals(&self, logits: &[f32], deltas: &[f32]) -> Vec<Proposal> {
        let (ih, iw) = (self.config.input_shape[1] as f32, self.config.input_shape[2] as f32);
        let mut cands = Vec::new();
        for (i, anchor) in self.anchors.iter().enumerate() {
            let score = 1.0 / (1.0 + (logits[2 * i] - logits[2 * i + 1]).exp());
            let b = apply_box_offsets(anchor, &deltas[4 * i..4 * i + 4]);
            let b = [b[0].clamp(0.0, iw), b[1].clamp(0.0, ih), b[2].clamp(0.0, iw), b[3].clamp(0.0, ih)];
            if b.iter().all(|v| v.is_finite()) && b[2] - b[0] >= self.config.min_box && b[3] - b[1] >= self.config.min_box {
                cands.push(Proposal {
                    bbox: b,
                    score,
                    anchor_index: i,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor_index.cmp(&b.anchor_index)));
        cands.truncate(self.config.pre_nms_top);
        let boxes: Vec<[f32; 4]> = cands.iter().map(|c| c.bbox).collect();
        let scores: Vec<f32> = cands.iter().map(|c| c.score).collect();
        nms(&boxes, &scores, self.config.nms_iou, self.config.top_n)
            .into_iter()
            .map(|i| cands[i])
            .collect()
    }

    /// Crops features for image-space `boxes` and returns `P×21` class
    /// logits and `P×84` refinements.
    pub fn stage_two(&self, tape: &mut Tape, p: &Binding, features: Var, boxes: &[[f32; 4]]) -> Result<(Var, Var), GraspError> {
        let (fh, fw) = self.feature_hw;
        let sy = self.config.input_shape[1] as f32 / fh as f32;
        let sx = self.config.input_shape[2] as f32 / fw as f32;
        let scaled: Vec<[f32; 4]> = boxes.iter().map(|b| [b[0] / sx, b[1] / sy, b[2] / sx, b[3] / sy]).collect();
        let s = self.config.crop_size;
        let crops = tape.crop_and_resize(features, &scaled, s)?;
        let c = self.config.backbone_channels[3];
        let flat = tape.reshape(crops, vec![boxes.len(), c * s * s])?;
        let h = self.fc.forward(tape, p, flat)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        Ok((self.cls.forward(tape, p, h)?, self.reg.forward(tape, p, h)?))
    }

    /// Candidates whose best orientation bin beats the no-grasp bin, sorted
    /// by confidence (descending) then anchor index.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<GraspCandidate>, GraspError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let x = tape.leaf(&image.clone().reshape(vec![1, image.shape()[0], image.shape()[1], image.shape()[2]])?);
        let s1 = self.stage_one(&mut tape, &p, x)?;
        let props = self.proposals(tape.value(s1.logits), tape.value(s1.deltas));
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<[f32; 4]> = props.iter().map(|p| p.bbox).collect();
        let (cls, reg) = self.stage_two(&mut tape, &p, s1.features, &boxes)?;
        let (cls, reg) = (tape.value(cls), tape.value(reg));
        let mut out = Vec::new();
        for (i, prop) in props.iter().enumerate() {
            let probs = softmax(&cls[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
            let mut best = 1;
            for c in 2..NUM_CLASSES {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            if probs[best] <= probs[0] {
                continue;
            }
            let bin = OrientationBin::new(best)?;
            let beta = &reg[i * NUM_CLASSES * 4 + best * 4..i * NUM_CLASSES * 4 + best * 4 + 4];
            let (cx, cy, w, h) = decode_offsets(&prop.bbox, beta);
            let Ok(rect) = GraspRect::new(cx, cy, w, h, bin_to_angle(bin)?) else {
                continue;
            };
            out.push(GraspCandidate {
                rect,
                bin,
                confidence: probs[best],
                anchor_index: prop.anchor_index,
            });
        }
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.anchor_index.cmp(&b.anchor_index)));
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &self.config.to_words(), &[&self.params])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraspError> {
        let decoded = checkpoint::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CONFIG_WORDS)?;
        let config = DetectorConfig::from_words(&decoded.config)?;
        let mut model = DetectorModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
        checkpoint::fill(&mut [&mut model.params], &decoded.values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraspError> {
        Ok(checkpoint::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, GraspError> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
