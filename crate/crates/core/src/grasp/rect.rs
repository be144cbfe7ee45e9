use serde::{Deserialize, Serialize};

use super::GraspError;

/// Maps an angle in degrees into `[−90, 90)` with period 180.
pub fn canonical_angle(theta: f32) -> f32 {
    let r = (theta + 90.0).rem_euclid(180.0) - 90.0;
    if r >= 90.0 {
        r - 180.0
    } else {
        r
    }
}

/// Smallest difference between two orientations, in `[0, 90]`.
pub fn angle_difference(a: f32, b: f32) -> f32 {
    let d = (a as f64 - b as f64).rem_euclid(180.0);
    d.min(180.0 - d) as f32
}

/// Oriented grasp rectangle. `w` spans the gripper opening along `theta`;
/// `h` spans the plates perpendicular to it. Angles are degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRect", into = "RawRect")]
pub struct GraspRect {
    x: f32,
    y: f32,
    w: f32,
    h: f32,
    theta: f32,
}

#[derive(Serialize, Deserialize)]
struct RawRect {
    x: f32,
    y: f32,
    w: f32,
    h: f32,
    theta_deg: f32,
}

impl TryFrom<RawRect> for GraspRect {
    type Error = GraspError;

    fn try_from(r: RawRect) -> Result<Self, GraspError> {
        GraspRect::new(r.x, r.y, r.w, r.h, r.theta_deg)
    }
}

impl From<GraspRect> for RawRect {
    fn from(r: GraspRect) -> Self {
        RawRect {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
            theta_deg: r.theta,
        }
    }
}

pub type Point = (f64, f64);

impl GraspRect {
    pub fn new(x: f32, y: f32, w: f32, h: f32, theta: f32) -> Result<Self, GraspError> {
        let all_finite = [x, y, w, h, theta].iter().all(|v| v.is_finite());
        if !all_finite || w <= 0.0 || h <= 0.0 {
            return Err(GraspError::InvalidRect(format!(
                "x={x} y={y} w={w} h={h} theta={theta}"
            )));
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn x(&self) -> f32 {
        self.x
    }

    pub fn y(&self) -> f32 {
        self.y
    }

    pub fn w(&self) -> f32 {
        self.w
    }

    pub fn h(&self) -> f32 {
        self.h
    }

    pub fn theta(&self) -> f32 {
        self.theta
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    /// Counter-clockwise corners (in a y-up frame).
    pub fn corners(&self) -> [Point; 4] {
        let t = (self.theta as f64).to_radians();
        let (s, c) = t.sin_cos();
        let (hw, hh) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
        let (ux, uy) = (c * hw, s * hw);
        let (vx, vy) = (-s * hh, c * hh);
        let (x, y) = (self.x as f64, self.y as f64);
        [
            (x - ux - vx, y - uy - vy),
            (x + ux - vx, y + uy - vy),
            (x + ux + vx, y + uy + vy),
            (x - ux + vx, y - uy + vy),
        ]
    }

    /// Axis-aligned bounding box `[x1, y1, x2, y2]`.
    pub fn hull(&self) -> [f32; 4] {
        let c = self.corners();
        let xs = c.iter().map(|p| p.0);
        let ys = c.iter().map(|p| p.1);
        [
            xs.clone().fold(f64::INFINITY, f64::min) as f32,
            ys.clone().fold(f64::INFINITY, f64::min) as f32,
            xs.fold(f64::NEG_INFINITY, f64::max) as f32,
            ys.fold(f64::NEG_INFINITY, f64::max) as f32,
        ]
    }

    /// Whether `(px, py)` lies inside the rectangle (boundary inclusive).
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let t = (self.theta as f64).to_radians();
        let (s, c) = t.sin_cos();
        let (dx, dy) = (px - self.x as f64, py - self.y as f64);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.w as f64 / 2.0 && across.abs() <= self.h as f64 / 2.0
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
pub fn clip_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (cur_in, prev_in) = (cross(a, b, cur) >= 0.0, cross(a, b, prev) >= 0.0);
            if cur_in != prev_in {
                let (d1, d2) = (cross(a, b, prev), cross(a, b, cur));
                let t = d1 / (d1 - d2);
                out.push((prev.0 + t * (cur.0 - prev.0), prev.1 + t * (cur.1 - prev.1)));
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

/// Intersection over union of two oriented rectangles.
pub fn rect_iou(a: &GraspRect, b: &GraspRect) -> f64 {
    let inter = polygon_area(&clip_polygon(&a.corners(), &b.corners()));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub const MAX_ANGLE_DIFFERENCE: f32 = 30.0;
pub const MIN_IOU: f64 = 0.25;

/// A prediction succeeds when some truth is within 30° (period 180) and
/// overlaps it with IoU above 0.25.
pub fn is_success(pred: &GraspRect, truths: &[GraspRect]) -> Result<bool, GraspError> {
    if truths.is_empty() {
        return Err(GraspError::EmptyTruths);
    }
    Ok(truths
        .iter()
        .any(|t| angle_difference(pred.theta, t.theta) <= MAX_ANGLE_DIFFERENCE && rect_iou(pred, t) > MIN_IOU))
}

/// Axis-aligned IoU of `[x1, y1, x2, y2]` boxes.
pub fn box_iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f32; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x: f32, y: f32, w: f32, h: f32, t: f32) -> GraspRect {
        GraspRect::new(x, y, w, h, t).unwrap()
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonical_angle(95.0), -85.0);
        assert_eq!(canonical_angle(90.0), -90.0);
        assert_eq!(canonical_angle(-90.0), -90.0);
        assert_eq!(canonical_angle(-270.0), -90.0);
        assert!(canonical_angle(-1e-9) < 90.0);
        assert_eq!(angle_difference(85.0, -85.0), 10.0);
        assert!(GraspRect::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(GraspRect::new(0.0, f32::NAN, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = r(0.5, 0.5, 1.0, 1.0, 0.0);
        assert!((rect_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = r(1.0, 0.5, 1.0, 1.0, 0.0);
        assert!((rect_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let far = r(10.0, 10.0, 1.0, 1.0, 30.0);
        assert_eq!(rect_iou(&a, &far), 0.0);
        // A square rotated by 90° is the same footprint.
        let c = r(3.0, 4.0, 2.0, 2.0, 0.0);
        let d = r(3.0, 4.0, 2.0, 2.0, 90.0);
        assert!((rect_iou(&c, &d) - 1.0).abs() < 1e-9);
        // A rect rotated by 90° about its centre: a plus shape.
        let e = r(0.0, 0.0, 4.0, 2.0, 0.0);
        let f = r(0.0, 0.0, 4.0, 2.0, 90.0);
        assert!((rect_iou(&e, &f) - 4.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn success_rule() {
        let t = r(50.0, 50.0, 30.0, 15.0, 10.0);
        assert!(is_success(&t, &[t]).unwrap());
        assert!(matches!(is_success(&t, &[]), Err(GraspError::EmptyTruths)));
        let rotated = r(50.0, 50.0, 30.0, 15.0, 41.0);
        assert!(!is_success(&rotated, &[t]).unwrap());
        let a = r(50.0, 50.0, 30.0, 30.0, 85.0);
        let b = r(50.0, 50.0, 30.0, 30.0, -85.0);
        assert!(is_success(&a, &[b]).unwrap());
    }

    #[test]
    fn iou_boundary_with_31_degrees() {
        // Overlap stays well above 0.25 yet the angle rule rejects.
        let t = r(0.0, 0.0, 20.0, 20.0, 0.0);
        let p = r(0.0, 0.0, 20.0, 20.0, 31.0);
        assert!(rect_iou(&p, &t) > 0.3);
        assert!(!is_success(&p, &[t]).unwrap());
    }

    #[test]
    fn hull_of_rotated_square() {
        let s = r(0.0, 0.0, 2.0, 2.0, 45.0);
        let h = s.hull();
        let d = 2f32.sqrt();
        for (v, e) in h.iter().zip([-d, -d, d, d]) {
            assert!((v - e).abs() < 1e-5);
        }
        assert_eq!(box_iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 0.0, 3.0, 2.0]), 1.0 / 3.0);
    }
}
