//! How much an intercepted latent reveals to a decoder that is not the
//! encoder's partner.

use edgegrasp_tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, CodecModel};
use crate::imageio::to_pixel_range;
use crate::metrics::{ssim, MetricError, SsimParams};

pub const MIN_MISMATCH_IMAGES: usize = 10;

#[derive(Debug, Error)]
pub enum MismatchError {
    #[error("need at least {MIN_MISMATCH_IMAGES} images, got {0}")]
    TooFewImages(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub images: usize,
    pub compression_ratio_percent: f64,
    pub matched_ssim: f64,
    pub foreign_ssim: f64,
    /// `matched_ssim − foreign_ssim`.
    pub gap: f64,
}

/// Mean SSIM of `encoder`'s latents decoded by `matched` and by `foreign`.
pub fn mismatch_gap(
    images: &[Tensor],
    encoder: &CodecModel,
    matched: &CodecModel,
    foreign: &CodecModel,
) -> Result<MismatchReport, MismatchError> {
    if images.len() < MIN_MISMATCH_IMAGES {
        return Err(MismatchError::TooFewImages(images.len()));
    }
    let latents = encoder.encode_batch(images)?;
    let params = SsimParams::default();
    let mean_ssim = |decoder: &CodecModel| -> Result<f64, MismatchError> {
        let mut total = 0.0;
        for (img, out) in images.iter().zip(decoder.decode_batch(&latents)?) {
            total += ssim(&to_pixel_range(img), &to_pixel_range(&out), &params)?;
        }
        Ok(total / images.len() as f64)
    };
    let matched_ssim = mean_ssim(matched)?;
    let foreign_ssim = mean_ssim(foreign)?;
    Ok(MismatchReport {
        images: images.len(),
        compression_ratio_percent: encoder.compression_ratio(),
        matched_ssim,
        foreign_ssim,
        gap: matched_ssim - foreign_ssim,
    })
}
