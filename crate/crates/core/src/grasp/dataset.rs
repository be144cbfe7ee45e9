//! Rectangle annotation text and the JSON dataset index.

use std::path::{Path, PathBuf};

use edgegrasp_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::rect::GraspRect;
use super::GraspError;
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedAnnotations {
    pub rects: Vec<GraspRect>,
    /// Vertex groups dropped for non-finite or degenerate coordinates.
    pub skipped: usize,
}

/// Parses groups of four `x y` vertex lines. The first edge gives `w` and
/// the orientation, the second edge gives `h`. Blank lines are ignored.
pub fn parse_rect_annotations(text: &str) -> Result<ParsedAnnotations, GraspError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let [xs, ys] = fields[..] else {
            return Err(GraspError::Parse {
                line: line_no,
                message: format!("expected two numbers, found {}", fields.len()),
            });
        };
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| GraspError::Parse {
                line: line_no,
                message: format!("{s:?}: {e}"),
            })
        };
        points.push((line_no, parse(xs)?, parse(ys)?));
    }
    if points.len() % 4 != 0 {
        let start = points[points.len() - points.len() % 4].0;
        return Err(GraspError::Parse {
            line: start,
            message: format!("{} vertex lines is not a multiple of 4", points.len()),
        });
    }
    let mut out = ParsedAnnotations::default();
    for group in points.chunks(4) {
        let v: Vec<(f64, f64)> = group.iter().map(|&(_, x, y)| (x, y)).collect();
        match rect_from_vertices(&v) {
            Some(r) => out.rects.push(r),
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} annotation groups with invalid coordinates", out.skipped);
    }
    Ok(out)
}

fn rect_from_vertices(v: &[(f64, f64)]) -> Option<GraspRect> {
    if v.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return None;
    }
    let (e1x, e1y) = (v[1].0 - v[0].0, v[1].1 - v[0].1);
    let (e2x, e2y) = (v[2].0 - v[1].0, v[2].1 - v[1].1);
    let cx = v.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let cy = v.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let w = e1x.hypot(e1y);
    let h = e2x.hypot(e2y);
    let theta = e1y.atan2(e1x).to_degrees();
    GraspRect::new(cx as f32, cy as f32, w as f32, h as f32, theta as f32).ok()
}

/// Inverse of [`parse_rect_annotations`].
pub fn format_rect_annotations(rects: &[GraspRect]) -> String {
    let mut out = String::new();
    for r in rects {
        for (x, y) in r.corners() {
            out.push_str(&format!("{x:.4} {y:.4}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image: PathBuf,
    pub annotations: PathBuf,
}

/// Maps images to annotation files; paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspSample {
    pub name: String,
    /// `3×210×150` in `[−1, 1]`.
    pub image: Tensor,
    pub truths: Vec<GraspRect>,
}

pub fn load_dataset(index_path: &Path) -> Result<Vec<GraspSample>, GraspError> {
    let text = std::fs::read_to_string(index_path)?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(index.entries.len());
    for e in index.entries {
        let image = imageio::load_model_input(&base.join(&e.image))?;
        let truths = parse_rect_annotations(&std::fs::read_to_string(base.join(&e.annotations))?)?.rects;
        out.push(GraspSample {
            name: e.image.display().to_string(),
            image,
            truths,
        });
    }
    Ok(out)
}

/// Writes `<name>.png`, `<name>.txt` and `index.json` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[GraspSample]) -> Result<PathBuf, GraspError> {
    std::fs::create_dir_all(dir)?;
    let mut index = DatasetIndex::default();
    for s in samples {
        let image = PathBuf::from(format!("{}.png", s.name));
        let annotations = PathBuf::from(format!("{}.txt", s.name));
        imageio::save_model_output(&s.image, &dir.join(&image))?;
        std::fs::write(dir.join(&annotations), format_rect_annotations(&s.truths))?;
        index.entries.push(IndexEntry { image, annotations });
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_square() {
        let p = parse_rect_annotations("0 0\n10 0\n10 10\n0 10\n").unwrap();
        assert_eq!(p.rects.len(), 1);
        let r = p.rects[0];
        assert_eq!((r.x(), r.y(), r.w(), r.h(), r.theta()), (5.0, 5.0, 10.0, 10.0, 0.0));
    }

    #[test]
    fn rotated_square() {
        let (c, s) = (45f64.to_radians().cos(), 45f64.to_radians().sin());
        let mut text = String::new();
        for (x, y) in [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)] {
            let (dx, dy) = (x - 5.0, y - 5.0);
            text.push_str(&format!("{} {}\n", 5.0 + dx * c - dy * s, 5.0 + dx * s + dy * c));
        }
        let r = parse_rect_annotations(&text).unwrap().rects[0];
        assert!((r.theta() - 45.0).abs() < 1e-5);
        assert!((r.x() - 5.0).abs() < 1e-6 && (r.y() - 5.0).abs() < 1e-6);
        assert!((r.w() - 10.0).abs() < 1e-6 && (r.h() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn empty_nan_and_bad_counts() {
        assert_eq!(parse_rect_annotations("").unwrap(), ParsedAnnotations::default());
        let p = parse_rect_annotations("NaN NaN\n1 0\n1 1\n0 1\n0 0\n4 0\n4 2\n0 2\n").unwrap();
        assert_eq!((p.rects.len(), p.skipped), (1, 1));
        match parse_rect_annotations("0 0\n1 0\n1 1\n0 1\n5 5\n") {
            Err(GraspError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_rect_annotations("0 0 0\n"), Err(GraspError::Parse { line: 1, .. })));
        assert!(matches!(parse_rect_annotations("a 0\n"), Err(GraspError::Parse { line: 1, .. })));
    }

    #[test]
    fn format_round_trip() {
        let rects = vec![
            GraspRect::new(30.0, 40.0, 20.0, 8.0, 33.0).unwrap(),
            GraspRect::new(90.0, 120.0, 14.0, 30.0, -71.5).unwrap(),
        ];
        let back = parse_rect_annotations(&format_rect_annotations(&rects)).unwrap().rects;
        for (a, b) in rects.iter().zip(&back) {
            assert!((a.x() - b.x()).abs() < 1e-3 && (a.y() - b.y()).abs() < 1e-3);
            assert!((a.w() - b.w()).abs() < 1e-3 && (a.h() - b.h()).abs() < 1e-3);
            assert!(super::super::rect::angle_difference(a.theta(), b.theta()) < 1e-2);
        }
    }
}
