//! Adversarial training of the codec: the decoder acts as generator against
//! a small convolutional discriminator.

pub mod discriminator;
pub mod loss;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use loss::{discriminator_loss, generator_loss, ms_ssim_var, unit_range_params};

use edgegrasp_tensor::{Adam, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecConfig, CodecError, CodecModel};
use crate::imageio::to_pixel_range;
use crate::metrics::{self, MetricError, Psnr, SsimParams};

#[derive(Debug, Error)]
pub enum GanError {
    #[error("shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("real and fake batches must be equal and non-empty (got {real} and {fake})")]
    BatchMismatch { real: usize, fake: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("non-finite {which} loss at step {step}")]
    NonFinite { step: usize, which: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Batches between report entries.
    pub log_every: usize,
    pub lambda_adv: f32,
    pub alpha_mix: f32,
    pub seed: u64,
    /// Stops early after this many batches.
    pub max_steps: Option<usize>,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 2e-4,
            batch_size: 30,
            log_every: 50,
            lambda_adv: 0.01,
            alpha_mix: 0.84,
            seed: 0,
            max_steps: None,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), GanError> {
        let ok = self.epochs > 0
            && self.learning_rate > 0.0
            && self.batch_size > 0
            && self.log_every > 0
            && self.lambda_adv >= 0.0
            && (0.0..=1.0).contains(&self.alpha_mix)
            && self.max_steps != Some(0);
        if !ok {
            return Err(GanError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Reconstruction quality on the validation images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    pub ssim: f64,
    /// Over the pooled squared error of the whole set.
    pub psnr: Psnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    /// Means over the batches since the previous entry.
    pub generator_loss: f32,
    pub discriminator_loss: f32,
    pub validation: ValidationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: ValidationStats,
    pub entries: Vec<LogEntry>,
    pub final_validation: ValidationStats,
    pub steps: usize,
}

impl TrainReport {
    /// One JSON object per log entry.
    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain data serializes") + "\n")
            .collect()
    }
}

pub struct TrainOutcome {
    pub codec: CodecModel,
    pub discriminator: Discriminator,
    pub report: TrainReport,
}

/// Mean SSIM (on the 0–255 scale) and pooled PSNR of `codec` on `images`.
pub fn validate(codec: &CodecModel, images: &[Tensor]) -> Result<ValidationStats, GanError> {
    if images.is_empty() {
        return Err(GanError::EmptyDataset("validation"));
    }
    let recon = codec.reconstruct(images)?;
    let params = SsimParams::default();
    let mut ssim = 0.0;
    for (x, y) in images.iter().zip(&recon) {
        ssim += metrics::ssim(&to_pixel_range(x), &to_pixel_range(y), &params)?;
    }
    let a = to_pixel_range(&Tensor::stack(&images.iter().collect::<Vec<_>>())?);
    let b = to_pixel_range(&Tensor::stack(&recon.iter().collect::<Vec<_>>())?);
    Ok(ValidationStats {
        ssim: ssim / images.len() as f64,
        psnr: metrics::psnr(&a, &b, 255.0)?,
    })
}

/// Alternates one discriminator step and one generator step per batch; the
/// encoder and decoder both descend the generator loss.
pub fn train(images: &[Tensor], validation: &[Tensor], codec_config: CodecConfig, cfg: &TrainConfig) -> Result<TrainOutcome, GanError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(GanError::EmptyDataset("training"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = CodecModel::new(codec_config, &mut init_rng)?;
    let dcfg = DiscriminatorConfig {
        input_shape: codec_config.input_shape,
        ..cfg.discriminator
    };
    let mut disc = Discriminator::new(dcfg, &mut init_rng)?;
    for img in images.iter().chain(validation) {
        codec.check_image(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let ms_params = unit_range_params();
    let (mut adam_enc, mut adam_dec, mut adam_disc) = (
        Adam::new(cfg.learning_rate),
        Adam::new(cfg.learning_rate),
        Adam::new(cfg.learning_rate),
    );
    let initial = validate(&codec, validation)?;
    let mut entries = Vec::new();
    let (mut g_acc, mut d_acc, mut n_acc) = (0.0f64, 0.0f64, 0usize);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let batch = Tensor::stack(&batch_idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;

            let mut g_tape = Tape::new();
            let enc_p = g_tape.bind(&codec.encoder.params, true);
            let dec_p = g_tape.bind(&codec.decoder.params, true);
            let x = g_tape.leaf(&batch);
            let z = codec.encoder.forward(&mut g_tape, &enc_p, x)?;
            let fake = codec.decoder.forward(&mut g_tape, &dec_p, z)?;

            let mut d_tape = Tape::new();
            let disc_p = d_tape.bind(&disc.params, true);
            let real_v = d_tape.leaf(&batch);
            let fake_v = d_tape.leaf(&g_tape.tensor(fake));
            let d_real = disc.forward(&mut d_tape, &disc_p, real_v, true, &mut rng)?;
            let d_fake = disc.forward(&mut d_tape, &disc_p, fake_v, true, &mut rng)?;
            let d_loss = discriminator_loss(&mut d_tape, d_real, d_fake)?;
            let d_value = d_tape.scalar(d_loss);
            if !d_value.is_finite() {
                return Err(GanError::NonFinite { step, which: "discriminator" });
            }
            d_tape.backward(d_loss)?;
            d_tape.write_grads(&disc_p, &mut disc.params)?;
            adam_disc.step(&mut disc.params)?;

            let gd_p = g_tape.bind(&disc.params, false);
            let d_on_fake = disc.forward(&mut g_tape, &gd_p, fake, true, &mut rng)?;
            let g_loss = generator_loss(&mut g_tape, fake, x, d_on_fake, cfg.alpha_mix, cfg.lambda_adv, &ms_params)?;
            let g_value = g_tape.scalar(g_loss);
            if !g_value.is_finite() {
                return Err(GanError::NonFinite { step, which: "generator" });
            }
            g_tape.backward(g_loss)?;
            g_tape.write_grads(&enc_p, &mut codec.encoder.params)?;
            g_tape.write_grads(&dec_p, &mut codec.decoder.params)?;
            adam_enc.step(&mut codec.encoder.params)?;
            adam_dec.step(&mut codec.decoder.params)?;

            g_acc += g_value as f64;
            d_acc += d_value as f64;
            n_acc += 1;
            if step % cfg.log_every == 0 {
                let validation = validate(&codec, validation)?;
                log::info!(
                    "step {step}: generator {:.4} discriminator {:.4} val ssim {:.4}",
                    g_acc / n_acc as f64,
                    d_acc / n_acc as f64,
                    validation.ssim
                );
                entries.push(LogEntry {
                    step,
                    epoch,
                    generator_loss: (g_acc / n_acc as f64) as f32,
                    discriminator_loss: (d_acc / n_acc as f64) as f32,
                    validation,
                });
                (g_acc, d_acc, n_acc) = (0.0, 0.0, 0);
            }
        }
    }
    for store in [&mut codec.encoder.params, &mut codec.decoder.params, &mut disc.params] {
        store.zero_grad();
    }
    let final_validation = validate(&codec, validation)?;
    Ok(TrainOutcome {
        codec,
        discriminator: disc,
        report: TrainReport {
            initial,
            entries,
            final_validation,
            steps: step,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny() -> (Vec<Tensor>, Vec<Tensor>, CodecConfig, TrainConfig) {
        let codec = CodecConfig {
            input_shape: [3, 48, 48],
            latent_channels: 4,
            extra_downsample_stages: 0,
            residual_blocks: 1,
            feature_channels: 4,
        };
        let cfg = TrainConfig {
            batch_size: 4,
            log_every: 2,
            max_steps: Some(4),
            discriminator: DiscriminatorConfig {
                channels: [2, 2, 2, 2],
                ..DiscriminatorConfig::default()
            },
            ..TrainConfig::default()
        };
        (synth::codec_images(8, (48, 48), 1), synth::codec_images(2, (48, 48), 2), codec, cfg)
    }

    #[test]
    fn deterministic_report_and_cadence() {
        let (train_set, val, codec, cfg) = tiny();
        let a = train(&train_set, &val, codec, &cfg).unwrap();
        let b = train(&train_set, &val, codec, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.codec, b.codec);
        assert_eq!(a.report.steps, 4);
        let steps: Vec<usize> = a.report.entries.iter().map(|e| e.step).collect();
        assert_eq!(steps, [2, 4]);
        assert_eq!(a.report.to_json_lines().lines().count(), 2);
        assert!(a.report.entries.iter().all(|e| e.generator_loss.is_finite() && e.discriminator_loss.is_finite()));
    }

    #[test]
    fn rejects_empty_and_bad_config() {
        let (train_set, val, codec, cfg) = tiny();
        assert!(matches!(train(&[], &val, codec, &cfg), Err(GanError::EmptyDataset(_))));
        let bad = TrainConfig { alpha_mix: 1.5, ..cfg };
        assert!(matches!(train(&train_set, &val, codec, &bad), Err(GanError::InvalidConfig(_))));
    }
}
