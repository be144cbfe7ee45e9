//! Full-reference image quality metrics: PSNR, SSIM and multi-scale SSIM.
//!
//! All three operate on `C×H×W` (or `H×W`) tensors of pixel intensities on
//! the scale given by the dynamic range (255 for 8-bit images). Colour images
//! are scored per channel and the channel scores averaged.

pub mod batch;

use edgegrasp_tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected H×W or C×H×W image, got {0:?}")]
    BadRank(Vec<usize>),
    #[error("{height}×{width} image is smaller than the {window}-pixel window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("{scales} scales requested but only {supported} fit a {height}×{width} image")]
    TooFewScales {
        scales: usize,
        supported: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid metric parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Peak signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Decibels(f64),
    /// Identical inputs; the ratio is unbounded.
    PerfectMatch,
}

impl Psnr {
    pub fn decibels(self) -> Option<f64> {
        match self {
            Psnr::Decibels(v) => Some(v),
            Psnr::PerfectMatch => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            dynamic_range: 255.0,
            k1: 0.01,
            k2: 0.03,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product, so its
    /// weights also sum to one.
    pub fn window_1d(&self) -> Vec<f64> {
        gaussian_window(self.window, self.sigma)
    }

    fn uses_default_exponents(&self) -> bool {
        self.alpha == 1.0 && self.beta == 1.0 && self.gamma == 1.0
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.sigma <= 0.0 || self.dynamic_range <= 0.0 || self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(MetricError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// The five-scale exponents commonly used for MS-SSIM.
pub const CANONICAL_MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsimParams {
    pub ssim: SsimParams,
    /// Per-scale exponents, finest first. Scales `1..M−1` weight the
    /// contrast·structure term; scale `M` weights the full SSIM term.
    pub weights: Vec<f64>,
}

impl MsSsimParams {
    /// The first `scales` canonical weights, renormalized to sum to one.
    pub fn with_scales(scales: usize) -> Self {
        let take = &CANONICAL_MS_SSIM_WEIGHTS[..scales.clamp(1, 5)];
        let total: f64 = take.iter().sum();
        Self {
            ssim: SsimParams::default(),
            weights: take.iter().map(|w| w / total).collect(),
        }
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }
}

impl Default for MsSsimParams {
    /// Three scales: a 210×150 image halves to 105×75 and 52×37, while a
    /// fourth and fifth halving would approach and then undercut the window.
    fn default() -> Self {
        Self::with_scales(3)
    }
}

/// A single-channel image in f64.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.data[2 * y * self.w + 2 * x]
                    + self.data[2 * y * self.w + 2 * x + 1]
                    + self.data[(2 * y + 1) * self.w + 2 * x]
                    + self.data[(2 * y + 1) * self.w + 2 * x + 1];
                data.push(0.25 * s);
            }
        }
        Plane { h, w, data }
    }
}

fn planes(t: &Tensor) -> Result<Vec<Plane>> {
    let (c, h, w) = match *t.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(MetricError::BadRank(t.shape().to_vec())),
    };
    Ok(t.data()
        .chunks(h * w)
        .take(c)
        .map(|ch| Plane {
            h,
            w,
            data: ch.iter().map(|&v| v as f64).collect(),
        })
        .collect())
}

fn paired_planes(a: &Tensor, b: &Tensor) -> Result<(Vec<Plane>, Vec<Plane>)> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok((planes(a)?, planes(b)?))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(total / a.len() as f64)
}

/// `10·log10(max²/MSE)`, or [`Psnr::PerfectMatch`] when the MSE is zero.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<Psnr> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr::PerfectMatch);
    }
    Ok(Psnr::Decibels(10.0 * (max_value * max_value / m).log10()))
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(p: &Plane, win: &[f64]) -> Plane {
    let k = win.len();
    let (oh, ow) = (p.h + 1 - k, p.w + 1 - k);
    let mut horiz = vec![0.0; p.h * ow];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            horiz[y * ow + x] = win.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut data = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            data[y * ow + x] = (0..k).map(|i| win[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    Plane { h: oh, w: ow, data }
}

/// Means of the SSIM map and of its contrast·structure factor for one plane.
struct SsimTerms {
    ssim: f64,
    cs: f64,
}

fn ssim_terms(a: &Plane, b: &Plane, params: &SsimParams) -> Result<SsimTerms> {
    let k = params.window;
    if a.h < k || a.w < k {
        return Err(MetricError::TooSmall {
            height: a.h,
            width: a.w,
            window: k,
        });
    }
    let win = params.window_1d();
    let sq = |p: &Plane, q: &Plane| Plane {
        h: p.h,
        w: p.w,
        data: p.data.iter().zip(&q.data).map(|(x, y)| x * y).collect(),
    };
    let mu_a = filter_valid(a, &win);
    let mu_b = filter_valid(b, &win);
    let e_aa = filter_valid(&sq(a, a), &win);
    let e_bb = filter_valid(&sq(b, b), &win);
    let e_ab = filter_valid(&sq(a, b), &win);
    let (c1, c2, c3) = (params.c1(), params.c2(), params.c3());
    let fused = params.uses_default_exponents() && c3 == c2 / 2.0;
    let n = mu_a.data.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = e_aa.data[i] - ma * ma;
        let vb = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        if fused {
            ssim_sum += lum * cs;
            cs_sum += cs;
        } else {
            let (sa, sb) = (va.max(0.0).sqrt(), vb.max(0.0).sqrt());
            let con = (2.0 * sa * sb + c2) / (va + vb + c2);
            let st = (cov + c3) / (sa * sb + c3);
            ssim_sum += lum.powf(params.alpha) * con.powf(params.beta) * st.powf(params.gamma);
            cs_sum += con.powf(params.beta) * st.powf(params.gamma);
        }
    }
    Ok(SsimTerms {
        ssim: ssim_sum / n,
        cs: cs_sum / n,
    })
}

/// Mean SSIM over all window positions, averaged across channels.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    let (pa, pb) = paired_planes(a, b)?;
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        total += ssim_terms(x, y, params)?.ssim;
    }
    Ok(total / pa.len() as f64)
}

/// Number of dyadic scales whose coarsest level still fits the window.
pub fn supported_scales(height: usize, width: usize, window: usize) -> usize {
    let (mut h, mut w, mut n) = (height, width, 0);
    while h >= window && w >= window {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale SSIM: contrast·structure at every scale but the coarsest, and
/// the full SSIM (luminance included) at the coarsest, combined as a weighted
/// geometric product. Negative per-scale means are clamped to zero.
pub fn ms_ssim(a: &Tensor, b: &Tensor, params: &MsSsimParams) -> Result<f64> {
    params.ssim.validate()?;
    if params.weights.is_empty() {
        return Err(MetricError::InvalidParams("no scales".into()));
    }
    let (pa, pb) = paired_planes(a, b)?;
    let (h, w) = (pa[0].h, pa[0].w);
    let supported = supported_scales(h, w, params.ssim.window);
    if supported < params.scales() {
        return Err(MetricError::TooFewScales {
            scales: params.scales(),
            supported,
            height: h,
            width: w,
        });
    }
    let m = params.scales();
    let channels = pa.len();
    let mut total = 0.0;
    for (x, y) in pa.into_iter().zip(pb) {
        let (mut x, mut y) = (x, y);
        let mut value = 1.0;
        for (j, &wj) in params.weights.iter().enumerate() {
            let terms = ssim_terms(&x, &y, &params.ssim)?;
            if j + 1 == m {
                value *= terms.ssim.max(0.0).powf(wj);
            } else {
                value *= terms.cs.max(0.0).powf(wj);
                x = x.downsample();
                y = y.downsample();
            }
        }
        total += value;
    }
    Ok(total / channels as f64)
}
