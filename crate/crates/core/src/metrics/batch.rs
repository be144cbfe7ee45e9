//! Scoring many image pairs at once, with per-pair rows and dataset averages.

use std::path::Path;

use edgegrasp_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{ms_ssim, psnr, ssim, supported_scales, MetricError, MsSsimParams, Psnr, SsimParams};
use crate::imageio::{self, ImageIoError};

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("no image pairs found under {0}")]
    Empty(String),
    #[error("{0} has no counterpart in the reconstructed directory")]
    Unpaired(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub name: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub pairs: Vec<PairScores>,
    /// Mean over pairs with a finite PSNR; `None` if every pair matched exactly.
    pub mean_psnr_db: Option<f64>,
    pub perfect_matches: usize,
    pub mean_ssim: f64,
    pub mean_ms_ssim: f64,
}

impl QualityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,psnr_db,ssim,ms_ssim\n");
        for p in &self.pairs {
            let db = match p.psnr {
                Psnr::Decibels(v) => format!("{v:.6}"),
                Psnr::PerfectMatch => "inf".into(),
            };
            out.push_str(&format!("{},{db},{:.8},{:.8}\n", p.name, p.ssim, p.ms_ssim));
        }
        out
    }
}

/// Scores `(name, reference, distorted)` triples given on the 0–255 scale.
/// MS-SSIM uses as many of the default scales as the image size supports.
pub fn evaluate_pairs(pairs: &[(String, Tensor, Tensor)]) -> Result<QualityTable, BatchError> {
    if pairs.is_empty() {
        return Err(BatchError::Empty("input list".into()));
    }
    let sp = SsimParams::default();
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, a, b) in pairs {
        let shape = a.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let scales = supported_scales(h, w, sp.window).clamp(1, MsSsimParams::default().scales());
        rows.push(PairScores {
            name: name.clone(),
            psnr: psnr(a, b, sp.dynamic_range)?,
            ssim: ssim(a, b, &sp)?,
            ms_ssim: ms_ssim(a, b, &MsSsimParams::with_scales(scales))?,
        });
    }
    let n = rows.len() as f64;
    let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr.decibels()).collect();
    Ok(QualityTable {
        mean_psnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        perfect_matches: rows.len() - finite.len(),
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_ms_ssim: rows.iter().map(|r| r.ms_ssim).sum::<f64>() / n,
        pairs: rows,
    })
}

/// Reads `dir/original/*.png` and the same-named files in
/// `dir/reconstructed/`, in file-name order.
pub fn load_pair_dir(dir: &Path) -> Result<Vec<(String, Tensor, Tensor)>, BatchError> {
    let originals = imageio::list_pngs(&dir.join("original"))?;
    if originals.is_empty() {
        return Err(BatchError::Empty(dir.display().to_string()));
    }
    let mut out = Vec::with_capacity(originals.len());
    for path in originals {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let other = dir.join("reconstructed").join(&name);
        if !other.is_file() {
            return Err(BatchError::Unpaired(name));
        }
        let a = imageio::load_pixels(&path)?;
        let b = imageio::load_pixels(&other)?;
        out.push((name, a, b));
    }
    Ok(out)
}
