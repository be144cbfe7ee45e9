//! PNG loading and saving, and conversion between pixel and model ranges.
//!
//! Model tensors are `3×H×W` in `[−1, 1]`; pixel tensors are `3×H×W` on the
//! 0–255 scale.

use std::path::{Path, PathBuf};

use edgegrasp_tensor::Tensor;
use image::imageops::FilterType;
use image::RgbImage;
use thiserror::Error;

pub const INPUT_HEIGHT: usize = 210;
pub const INPUT_WIDTH: usize = 150;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("expected a 3×H×W tensor, got {0:?}")]
    Shape(Vec<usize>),
}

type Result<T> = std::result::Result<T, ImageIoError>;

pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| ImageIoError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| ImageIoError::Decode {
        path: path.display().to_string(),
        source,
    })?;
    Ok(img.to_rgb8())
}

fn rgb_to_tensor(img: &RgbImage, f: impl Fn(u8) -> f32) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f(px[c]);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image has non-zero extents")
}

/// Pixel-scale tensor at the file's native size.
pub fn load_pixels(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&read_rgb(path)?, f32::from))
}

/// Model-range tensor, resized to 210×150 when the file differs.
pub fn load_model_input(path: &Path) -> Result<Tensor> {
    let mut img = read_rgb(path)?;
    if (img.height() as usize, img.width() as usize) != (INPUT_HEIGHT, INPUT_WIDTH) {
        img = image::imageops::resize(&img, INPUT_WIDTH as u32, INPUT_HEIGHT as u32, FilterType::Triangle);
    }
    Ok(rgb_to_tensor(&img, |v| v as f32 / 127.5 - 1.0))
}

/// `[−1, 1]` → `[0, 255]`, without rounding.
pub fn to_pixel_range(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| (v + 1.0) * 127.5).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// `[0, 255]` → `[−1, 1]`.
pub fn to_model_range(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v / 127.5 - 1.0).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Quantizes a model-range tensor to 8-bit RGB.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = t.shape()[..] else {
        return Err(ImageIoError::Shape(t.shape().to_vec()));
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn save_model_output(t: &Tensor, path: &Path) -> Result<()> {
    to_rgb(t)?.save(path).map_err(|source| ImageIoError::Encode {
        path: path.display().to_string(),
        source,
    })
}

/// Byte size of the image as a PNG file.
pub fn png_size(t: &Tensor) -> Result<usize> {
    let img = to_rgb(t)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| ImageIoError::Encode {
            path: "<memory>".into(),
            source,
        })?;
    Ok(buf.into_inner().len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_nearest_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..3 * 210 * 150).map(|i| ((i % 256) as f32) / 127.5 - 1.0).collect();
        let t = Tensor::new(vec![3, 210, 150], data).unwrap();
        save_model_output(&t, &path).unwrap();
        let back = load_model_input(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let px = load_pixels(&path).unwrap();
        assert_eq!(px.data()[255], 255.0);
    }

    #[test]
    fn other_sizes_are_resized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.png");
        RgbImage::from_pixel(40, 30, image::Rgb([255, 0, 0])).save(&path).unwrap();
        let t = load_model_input(&path).unwrap();
        assert_eq!(t.shape(), [3, 210, 150]);
        assert!((t.data()[0] - 1.0).abs() < 1e-6);
        assert!((t.data()[210 * 150] + 1.0).abs() < 1e-6);
    }
}
