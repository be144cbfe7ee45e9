//! Deterministic synthetic images for the toy training runs.

use edgegrasp_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grasp::dataset::GraspSample;
use crate::grasp::rect::GraspRect;

/// Two-colour gradients overlaid with oriented stripes, plus 2–4 striped
/// rectangles and ellipses, in `[−1, 1]`.
pub fn codec_images(count: usize, (height, width): (usize, usize), seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| codec_image(&mut rng, height, width)).collect()
}

fn colour(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Sinusoid with a random orientation, period and phase.
struct Stripes {
    kx: f32,
    ky: f32,
    phase: f32,
    amplitude: f32,
}

impl Stripes {
    fn random(rng: &mut ChaCha8Rng, amplitude: f32) -> Self {
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let k = std::f32::consts::TAU / rng.random_range(10.0..28.0f32);
        Self {
            kx: k * angle.cos(),
            ky: k * angle.sin(),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            amplitude,
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        self.amplitude * (self.kx * x as f32 + self.ky * y as f32 + self.phase).sin()
    }
}

fn codec_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let (c0, c1) = (colour(rng, -0.6, 0.6), colour(rng, -0.6, 0.6));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (w as f32 * dx.abs() + h as f32 * dy.abs()).max(1.0);
    let stripes = Stripes::random(rng, 0.35);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 - w as f32 / 2.0) * dx + (y as f32 - h as f32 / 2.0) * dy) / span + 0.5;
            let s = stripes.at(x, y);
            for c in 0..3 {
                data[c * h * w + y * w + x] = c0[c] + (c1[c] - c0[c]) * t + s;
            }
        }
    }
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let col = colour(rng, -0.7, 0.7);
        let fill = Stripes::random(rng, 0.3);
        let (cx, cy) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
        let (rx, ry) = (rng.random_range(10.0..40.0f32), rng.random_range(10.0..40.0f32));
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    let s = fill.at(x, y);
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = col[c] + s;
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

pub const SCENE_HEIGHT: usize = 210;
pub const SCENE_WIDTH: usize = 150;
pub const SCENE_BACKGROUND: [f32; 3] = [-0.5, -0.45, -0.4];

/// The scene background with no objects.
pub fn blank_scene() -> Tensor {
    let plane = SCENE_HEIGHT * SCENE_WIDTH;
    let data = (0..3 * plane).map(|i| SCENE_BACKGROUND[i / plane]).collect();
    Tensor::new(vec![3, SCENE_HEIGHT, SCENE_WIDTH], data).unwrap()
}

/// Scenes of 2–3 bright bars on a flat background. Each bar has one grasp:
/// centred on the bar, closing across its width (`θ` = bar angle + 90),
/// opening `bar width + 16`, plate extent 20.
pub fn grasp_scenes(count: usize, seed: u64) -> Vec<GraspSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (image, truths) = grasp_scene(&mut rng);
            GraspSample {
                name: format!("scene{i:02}"),
                image,
                truths,
            }
        })
        .collect()
}

const MAX_PLACEMENT_TRIES: usize = 1000;

fn grasp_scene(rng: &mut ChaCha8Rng) -> (Tensor, Vec<GraspRect>) {
    let (h, w) = (SCENE_HEIGHT, SCENE_WIDTH);
    let mut img = blank_scene();
    let n = rng.random_range(2..=3);
    let mut centres: Vec<(f32, f32)> = Vec::new();
    let mut truths = Vec::new();
    let mut rejected = 0;
    while centres.len() < n {
        let c = (rng.random_range(35.0..w as f32 - 35.0), rng.random_range(35.0..h as f32 - 35.0));
        if centres.iter().any(|o| (o.0 - c.0).hypot(o.1 - c.1) < 70.0) {
            rejected += 1;
            if rejected == MAX_PLACEMENT_TRIES {
                // Earlier bars can leave no room; start the scene over.
                img = blank_scene();
                centres.clear();
                truths.clear();
                rejected = 0;
            }
            continue;
        }
        let length = rng.random_range(46.0..62.0f32);
        let width = rng.random_range(14.0..20.0f32);
        let angle = rng.random_range(-90.0..90.0f32);
        let bar = GraspRect::new(c.0, c.1, length, width, angle).unwrap();
        let col = colour(rng, 0.2, 1.0);
        let d = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                if bar.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for ch in 0..3 {
                        d[ch * h * w + y * w + x] = col[ch];
                    }
                }
            }
        }
        truths.push(GraspRect::new(c.0, c.1, width + 16.0, 20.0, angle + 90.0).unwrap());
        centres.push(c);
    }
    (img, truths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = codec_images(3, (42, 30), 7);
        assert_eq!(a, codec_images(3, (42, 30), 7));
        assert_ne!(a, codec_images(3, (42, 30), 8));
        assert!(a.iter().all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        let s = grasp_scenes(2, 1);
        assert_eq!(s, grasp_scenes(2, 1));
        for scene in &s {
            assert!((2..=3).contains(&scene.truths.len()));
            assert_ne!(scene.image, blank_scene());
            for t in &scene.truths {
                let hull = t.hull();
                assert!(hull[0] >= 0.0 && hull[2] <= 150.0 && hull[1] >= 0.0 && hull[3] <= 210.0);
            }
        }
    }

    #[test]
    fn crowded_placements_restart_instead_of_hanging() {
        assert_eq!(grasp_scenes(6, 31).len(), 6);
    }
}
