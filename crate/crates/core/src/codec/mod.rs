//! Convolutional encoder/decoder pair producing a compact latent tensor.
//!
//! The encoder halves the spatial extents twice with stride-2 convolutions,
//! optionally more times, runs a stack of residual blocks and projects to
//! `C_c` latent channels. The decoder mirrors it with transposed
//! convolutions interleaved with residual blocks and ends in `tanh`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::hash::Hasher;

use edgegrasp_tensor::{Binding, ConvGeom, ParamStore, Tape, Tensor, TensorError, Var};
use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::nn::{Conv, ResBlock, INIT_STD, LEAKY_SLOPE};

pub const LATENT_CHANNEL_CHOICES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(String),
    #[error("shape with a zero extent: {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("input shape {actual:?} does not match configured {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("pixel {index} has value {value}, outside [-1, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("latent shape {actual:?} does not match configured {expected:?}")]
    LatentShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// `100 · latent elements / input elements`.
pub fn compression_ratio(input_shape: &[usize], latent_shape: &[usize]) -> Result<f64> {
    for s in [input_shape, latent_shape] {
        if s.is_empty() || s.contains(&0) {
            return Err(CodecError::ZeroExtent(s.to_vec()));
        }
    }
    let n_in: usize = input_shape.iter().product();
    let n_lat: usize = latent_shape.iter().product();
    Ok(100.0 * n_lat as f64 / n_in as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// `C_i × H_i × W_i`.
    pub input_shape: [usize; 3],
    pub latent_channels: usize,
    pub extra_downsample_stages: usize,
    pub residual_blocks: usize,
    /// Width of the hidden feature maps.
    pub feature_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 210, 150],
            latent_channels: 8,
            extra_downsample_stages: 0,
            residual_blocks: 3,
            feature_channels: 16,
        }
    }
}

impl CodecConfig {
    pub fn with_latent_channels(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            ..Self::default()
        }
    }

    /// Spatial extents at the input and after every stride-2 stage.
    pub fn stage_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(CodecError::ZeroExtent(self.input_shape.to_vec()));
        }
        let mut sizes = vec![(h, w)];
        for _ in 0..2 + self.extra_downsample_stages {
            let &(h, w) = sizes.last().unwrap();
            let g = ConvGeom::new(1, h, w, 4, 2, 1).ok_or_else(|| {
                CodecError::InvalidConfig(format!(
                    "{} downsampling stages shrink {}×{} below one pixel",
                    2 + self.extra_downsample_stages,
                    self.input_shape[1],
                    self.input_shape[2]
                ))
            })?;
            sizes.push((g.out_height, g.out_width));
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if !LATENT_CHANNEL_CHOICES.contains(&self.latent_channels) {
            return Err(CodecError::InvalidConfig(format!(
                "latent_channels {} not in {LATENT_CHANNEL_CHOICES:?}",
                self.latent_channels
            )));
        }
        if self.feature_channels < 2 {
            return Err(CodecError::InvalidConfig("feature_channels must be at least 2".into()));
        }
        self.stage_sizes().map(|_| ())
    }

    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        let &(h, w) = self.stage_sizes()?.last().unwrap();
        Ok([self.latent_channels, h, w])
    }

    pub fn compression_ratio(&self) -> Result<f64> {
        compression_ratio(&self.input_shape, &self.latent_shape()?)
    }

    fn output_features(&self) -> usize {
        (self.feature_channels / 2).max(2)
    }

    /// Residual blocks per decoder group: before the first upsample, between
    /// the two, and after the second.
    fn decoder_groups(&self) -> [usize; 3] {
        let r = self.residual_blocks;
        [r / 3 + usize::from(r % 3 > 0), r / 3 + usize::from(r % 3 > 1), r / 3]
    }

    pub(crate) fn to_words(self) -> [u32; 7] {
        let [c, h, w] = self.input_shape;
        [
            c,
            h,
            w,
            self.latent_channels,
            self.extra_downsample_stages,
            self.residual_blocks,
            self.feature_channels,
        ]
        .map(|v| v as u32)
    }

    pub(crate) fn from_words(words: &[u32]) -> Self {
        let v = |i: usize| words[i] as usize;
        Self {
            input_shape: [v(0), v(1), v(2)],
            latent_channels: v(3),
            extra_downsample_stages: v(4),
            residual_blocks: v(5),
            feature_channels: v(6),
        }
    }
}

/// A latent tensor and the id of the decoder it was produced for.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub tensor: Tensor,
    pub model_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: ParamStore,
    down: Vec<Conv>,
    blocks: Vec<ResBlock>,
    project: Conv,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(cfg: &CodecConfig, std: f32, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let f = cfg.feature_channels;
        let mut down = Vec::new();
        for i in 0..2 + cfg.extra_downsample_stages {
            let cin = if i == 0 { cfg.input_shape[0] } else { f };
            down.push(Conv::new(&mut p, &format!("enc.down{i}"), (cin, f, 4), 2, 1, std, rng));
        }
        let blocks = (0..cfg.residual_blocks)
            .map(|i| ResBlock::new(&mut p, &format!("enc.res{i}"), f, std, rng))
            .collect();
        let project = Conv::new(&mut p, "enc.project", (f, cfg.latent_channels, 3), 1, 1, std, rng);
        Self {
            params: p,
            down,
            blocks,
            project,
        }
    }

    /// `N×C_i×H_i×W_i` → `N×C_c×H_c×W_c`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.down {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        Ok(self.project.forward(tape, p, h)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Up { conv: Conv, height: usize, width: usize },
    Res(ResBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub params: ParamStore,
    input: Conv,
    stages: Vec<Stage>,
    output: Conv,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &CodecConfig, std: f32, rng: &mut R) -> Result<Self> {
        let sizes = cfg.stage_sizes()?;
        let mut p = ParamStore::new();
        let (f, f_out) = (cfg.feature_channels, cfg.output_features());
        let input = Conv::new(&mut p, "dec.input", (cfg.latent_channels, f, 3), 1, 1, std, rng);
        let mut stages = Vec::new();
        let up = |p: &mut ParamStore, idx: usize, cin: usize, cout: usize, rng: &mut R| {
            let (height, width) = sizes[idx];
            Stage::Up {
                conv: Conv::transposed(p, &format!("dec.up{idx}"), (cin, cout, 4), 2, 1, std, rng),
                height,
                width,
            }
        };
        // Extra stages first, coarsest to finest, back to the two-stage extents.
        for idx in (2..sizes.len() - 1).rev() {
            stages.push(up(&mut p, idx, f, f, rng));
        }
        let [g0, g1, g2] = cfg.decoder_groups();
        let res = |p: &mut ParamStore, stages: &mut Vec<Stage>, count: usize, ch: usize, tag: &str, rng: &mut R| {
            for i in 0..count {
                stages.push(Stage::Res(ResBlock::new(p, &format!("dec.res{tag}{i}"), ch, std, rng)));
            }
        };
        res(&mut p, &mut stages, g0, f, "a", rng);
        stages.push(up(&mut p, 1, f, f, rng));
        res(&mut p, &mut stages, g1, f, "b", rng);
        stages.push(up(&mut p, 0, f, f_out, rng));
        res(&mut p, &mut stages, g2, f_out, "c", rng);
        let output = Conv::new(&mut p, "dec.output", (f_out, cfg.input_shape[0], 3), 1, 1, std, rng);
        Ok(Self {
            params: p,
            input,
            stages,
            output,
        })
    }

    /// `N×C_c×H_c×W_c` → `N×C_i×H_i×W_i`, values in `[−1, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, z: Var) -> Result<Var> {
        let h = self.input.forward(tape, p, z)?;
        let mut h = tape.leaky_relu(h, LEAKY_SLOPE);
        for stage in &self.stages {
            h = match stage {
                Stage::Res(block) => block.forward(tape, p, h)?,
                Stage::Up { conv, height, width } => {
                    let u = conv.forward(tape, p, h)?;
                    let u = tape.pad_replicate(u, *height, *width)?;
                    tape.leaky_relu(u, LEAKY_SLOPE)
                }
            };
        }
        let out = self.output.forward(tape, p, h)?;
        Ok(tape.tanh(out))
    }

    /// FNV-1a hash over the parameter shapes and values.
    pub fn model_id(&self) -> u64 {
        let mut h = FnvHasher::default();
        for t in self.params.tensors() {
            for &d in t.shape() {
                h.write(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl CodecModel {
    /// Weights drawn from `N(0, 0.02²)`, biases zero.
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        Self::with_std(config, INIT_STD, rng)
    }

    /// [`CodecModel::new`] driven by a ChaCha8 stream seeded with `seed`.
    pub fn from_seed(config: CodecConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn with_std<R: Rng + ?Sized>(config: CodecConfig, std: f32, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, std, rng);
        let decoder = Decoder::new(&config, std, rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn model_id(&self) -> u64 {
        self.decoder.model_id()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.config.latent_shape().expect("validated at construction")
    }

    pub fn compression_ratio(&self) -> f64 {
        self.config.compression_ratio().expect("validated at construction")
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input_shape {
            return Err(CodecError::InputShape {
                expected: self.config.input_shape.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        if let Some((index, &value)) = image
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(CodecError::PixelRange { index, value });
        }
        Ok(())
    }

    pub fn encode(&self, image: &Tensor) -> Result<Latent> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Vec<Latent>> {
        for img in images {
            self.check_image(img)?;
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let x = Tensor::stack(&refs)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.encoder.params, false);
        let xv = tape.leaf(&x);
        let z = self.encoder.forward(&mut tape, &p, xv)?;
        let id = self.model_id();
        Ok(tape
            .tensor(z)
            .unstack()
            .into_iter()
            .map(|tensor| Latent { tensor, model_id: id })
            .collect())
    }

    /// Decodes with this model's decoder regardless of `latent.model_id`.
    pub fn decode(&self, latent: &Latent) -> Result<Tensor> {
        Ok(self.decode_batch(std::slice::from_ref(latent))?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[Latent]) -> Result<Vec<Tensor>> {
        let expected = self.latent_shape();
        for l in latents {
            if l.tensor.shape() != expected {
                return Err(CodecError::LatentShape {
                    expected: expected.to_vec(),
                    actual: l.tensor.shape().to_vec(),
                });
            }
        }
        let refs: Vec<&Tensor> = latents.iter().map(|l| &l.tensor).collect();
        let z = Tensor::stack(&refs)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.decoder.params, false);
        let zv = tape.leaf(&z);
        let y = self.decoder.forward(&mut tape, &p, zv)?;
        Ok(tape.tensor(y).unstack())
    }

    /// Encode then decode with this model.
    pub fn reconstruct(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let latents = self.encode_batch(images)?;
        self.decode_batch(&latents)
    }

    /// This model's encoder paired with `other`'s decoder.
    pub fn with_decoder_of(&self, other: &CodecModel) -> Result<CodecModel> {
        if other.config != self.config {
            return Err(CodecError::InvalidConfig("decoder comes from a differently shaped codec".into()));
        }
        Ok(CodecModel {
            config: self.config,
            encoder: self.encoder.clone(),
            decoder: other.decoder.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(latent_channels: usize, extra: usize) -> CodecConfig {
        CodecConfig {
            input_shape: [3, 42, 30],
            latent_channels,
            extra_downsample_stages: extra,
            residual_blocks: 3,
            feature_channels: 4,
        }
    }

    #[test]
    fn ratio_examples() {
        let r = compression_ratio(&[3, 210, 150], &[16, 52, 37]).unwrap();
        assert!((r - 32.58).abs() < 0.005);
        assert_eq!(compression_ratio(&[3, 4, 5], &[3, 4, 5]).unwrap(), 100.0);
        assert!(matches!(compression_ratio(&[3, 0, 5], &[1, 1, 1]), Err(CodecError::ZeroExtent(_))));
    }

    #[test]
    fn stage_sizes_follow_floor_halving() {
        let cfg = CodecConfig {
            extra_downsample_stages: 1,
            latent_channels: 2,
            ..CodecConfig::default()
        };
        assert_eq!(cfg.stage_sizes().unwrap(), vec![(210, 150), (105, 75), (52, 37), (26, 18)]);
        assert!((cfg.compression_ratio().unwrap() - 100.0 * 936.0 / 94500.0).abs() < 1e-12);
        let deep = CodecConfig {
            extra_downsample_stages: 5,
            ..CodecConfig::default()
        };
        assert_eq!(deep.latent_shape().unwrap(), [8, 1, 1]);
        let too_deep = CodecConfig {
            extra_downsample_stages: 6,
            ..CodecConfig::default()
        };
        assert!(matches!(too_deep.validate(), Err(CodecError::InvalidConfig(_))));
        assert!(CodecConfig::with_latent_channels(3).validate().is_err());
    }

    #[test]
    fn decoder_groups_split_evenly() {
        let g = |r| {
            CodecConfig {
                residual_blocks: r,
                ..CodecConfig::default()
            }
            .decoder_groups()
        };
        assert_eq!(g(3), [1, 1, 1]);
        assert_eq!(g(4), [2, 1, 1]);
        assert_eq!(g(5), [2, 2, 1]);
        assert_eq!(g(0), [0, 0, 0]);
    }

    #[test]
    fn encode_decode_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c, extra) in [(2, 0), (4, 1), (1, 2)] {
            let cfg = small(c, extra);
            // A wider init drives tanh into saturation, stressing the range check.
            let m = CodecModel::with_std(cfg, 0.5, &mut rng).unwrap();
            let x = Tensor::uniform(vec![3, 42, 30], -1.0, 1.0, &mut rng);
            let z = m.encode(&x).unwrap();
            assert_eq!(z.tensor.shape(), m.latent_shape());
            assert_eq!(z.model_id, m.model_id());
            let y = m.decode(&z).unwrap();
            assert_eq!(y.shape(), [3, 42, 30]);
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let zero = Latent {
                tensor: Tensor::zeros(m.latent_shape().to_vec()),
                model_id: 0,
            };
            assert!(m.decode(&zero).unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = CodecModel::new(small(2, 0), &mut rng).unwrap();
        assert!(matches!(
            m.encode(&Tensor::zeros(vec![3, 42, 31])),
            Err(CodecError::InputShape { .. })
        ));
        let mut x = Tensor::zeros(vec![3, 42, 30]);
        x.data_mut()[5] = 1.5;
        assert!(matches!(m.encode(&x), Err(CodecError::PixelRange { index: 5, .. })));
        let bad = Latent {
            tensor: Tensor::zeros(vec![2, 10, 8]),
            model_id: 0,
        };
        assert!(matches!(m.decode(&bad), Err(CodecError::LatentShape { .. })));
    }

    #[test]
    fn one_pixel_change_changes_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = CodecModel::new(small(4, 0), &mut rng).unwrap();
        let a = Tensor::uniform(vec![3, 42, 30], -1.0, 1.0, &mut rng);
        let mut b = a.clone();
        b.data_mut()[100] = -b.data()[100];
        assert_ne!(m.encode(&a).unwrap().tensor, m.encode(&b).unwrap().tensor);
        assert_eq!(m.encode(&a).unwrap(), m.encode(&a).unwrap());
    }

    #[test]
    fn model_id_tracks_decoder_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = CodecModel::new(small(2, 0), &mut rng).unwrap();
        let b = CodecModel::new(small(2, 0), &mut rng).unwrap();
        assert_ne!(a.model_id(), b.model_id());
        let mut c = a.clone();
        c.encoder.params.tensors_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(c.model_id(), a.model_id());
        c.decoder.params.tensors_mut()[0].data_mut()[0] += 1.0;
        assert_ne!(c.model_id(), a.model_id());
        assert_eq!(a.with_decoder_of(&b).unwrap().model_id(), b.model_id());
    }
}
