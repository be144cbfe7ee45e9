//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it is used to verify.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Norm-wise relative error per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub relative_errors: Vec<f64>,
    /// The same measure over all inputs' gradients concatenated. A single
    /// input with a near-zero gradient (a bias whose weights nearly cancel)
    /// is dominated by f32 rounding in the numeric side, so this is the
    /// figure compared against tolerances.
    pub overall_relative_error: f64,
    pub analytic: Vec<Vec<f32>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn relative_error(&self) -> f64 {
        self.overall_relative_error
    }
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape's gradients of `build` with respect to each of `inputs`
/// against central differences with step `h`.
///
/// `build` must produce a one-element loss and be a pure function of the
/// input values (any randomness has to be re-seeded inside the closure).
pub fn check<F>(inputs: &[Tensor], h: f32, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss) as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // The effective step is what f32 actually represented.
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            grad.push((plus - minus) / step);
        }
        numeric.push(grad);
    }
    let relative_errors = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(a, n)).collect();
    let all_a: Vec<f32> = analytic.iter().flatten().copied().collect();
    let all_n: Vec<f64> = numeric.iter().flatten().copied().collect();
    Ok(GradCheckReport {
        relative_errors,
        overall_relative_error: relative_error(&all_a, &all_n),
        analytic,
        numeric,
    })
}

/// Outcome of checking one operation kind over several random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// `Σ out ⊙ r` for a fixed random `r`, turning any op output into a scalar
/// whose gradient exercises every output element.
fn weighted(tape: &mut Tape, out: Var, weights: &[f32]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(shape, weights.to_vec())?;
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// Values bounded away from zero, so kinks at the origin are never straddled.
fn away_from_zero<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = crate::numel(shape);
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn unit<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Random instance generator for one op kind: inputs plus the loss builder.
fn instance<R: rand::Rng>(op: &'static str, rng: &mut R) -> (Vec<Tensor>, Builder) {
    let rows = rng.random_range(1..4usize);
    let cols = rng.random_range(2..5usize);
    let shape = vec![rows, cols];
    let n = rows * cols;
    let weights: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w1 = weights.clone();
    macro_rules! unary {
        ($input:expr, $f:expr) => {{
            let f = $f;
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = f(t, v[0])?;
                weighted(t, o, &w1)
            });
            (vec![$input], b)
        }};
    }
    macro_rules! binary {
        ($a:expr, $b:expr, $f:expr) => {{
            let f = $f;
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = f(t, v[0], v[1])?;
                weighted(t, o, &w1)
            });
            (vec![$a, $b], b)
        }};
    }
    match op {
        "add" => binary!(unit(&shape, rng), unit(&shape, rng), |t: &mut Tape, a, b| t.add(a, b)),
        "sub" => binary!(unit(&shape, rng), unit(&shape, rng), |t: &mut Tape, a, b| t.sub(a, b)),
        "mul" => binary!(unit(&shape, rng), unit(&shape, rng), |t: &mut Tape, a, b| t.mul(a, b)),
        "div" => {
            let den = Tensor::uniform(shape.clone(), 0.5, 2.0, rng);
            binary!(unit(&shape, rng), den, |t: &mut Tape, a, b| t.div(a, b))
        }
        "scale" => {
            let s = rng.random_range(-2.0f32..2.0);
            unary!(unit(&shape, rng), move |t: &mut Tape, x| Ok(t.scale(x, s)))
        }
        "add_scalar" => {
            let s = rng.random_range(-2.0f32..2.0);
            unary!(unit(&shape, rng), move |t: &mut Tape, x| Ok(t.add_scalar(x, s)))
        }
        "square" => unary!(unit(&shape, rng), |t: &mut Tape, x| Ok(t.square(x))),
        "abs" => unary!(away_from_zero(&shape, rng), |t: &mut Tape, x| Ok(t.abs(x))),
        "powf" => {
            let p = rng.random_range(0.1f32..2.0);
            let base = Tensor::uniform(shape.clone(), 0.3, 1.5, rng);
            unary!(base, move |t: &mut Tape, x| Ok(t.powf(x, p)))
        }
        "clamp_min" => unary!(away_from_zero(&shape, rng), |t: &mut Tape, x| Ok(t.clamp_min(x, 0.0))),
        "leaky_relu" => unary!(away_from_zero(&shape, rng), |t: &mut Tape, x| Ok(t.leaky_relu(x, 0.2))),
        "tanh" => unary!(unit(&shape, rng), |t: &mut Tape, x| Ok(t.tanh(x))),
        "dropout" => {
            let seed: u64 = rng.random();
            unary!(unit(&shape, rng), move |t: &mut Tape, x| {
                use rand::SeedableRng;
                let mut r = rand::rngs::StdRng::seed_from_u64(seed);
                t.dropout(x, 0.3, true, &mut r)
            })
        }
        "sum" => {
            let x = unit(&shape, rng);
            let b: Builder = Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.sum(v[0]);
                Ok(t.square(s))
            });
            (vec![x], b)
        }
        "mean" => {
            let x = unit(&shape, rng);
            let b: Builder = Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.mean(v[0]);
                Ok(t.square(s))
            });
            (vec![x], b)
        }
        "mean_rows" => {
            let x = unit(&shape, rng);
            let wr: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let m = t.mean_rows(v[0], cols)?;
                weighted(t, m, &wr)
            });
            (vec![x], b)
        }
        "reshape" => unary!(unit(&shape, rng), move |t: &mut Tape, x| t.reshape(x, vec![n])),
        "gather" => {
            let src = unit(&[n + 2], rng);
            let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..n + 2)).collect();
            let sh = shape.clone();
            unary!(src, move |t: &mut Tape, x| t.gather(x, index.clone(), sh.clone()))
        }
        "pad_replicate" => {
            let (h, w) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
            let (ph, pw) = (h + rng.random_range(0..3usize), w + rng.random_range(1..3usize));
            let wr: Vec<f32> = (0..2 * ph * pw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = unit(&[2, h, w], rng);
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.pad_replicate(v[0], ph, pw)?;
                weighted(t, o, &wr)
            });
            (vec![x], b)
        }
        "avg_pool2" => {
            let (h, w) = (rng.random_range(2..7usize), rng.random_range(2..7usize));
            let wr: Vec<f32> = (0..2 * (h / 2) * (w / 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = unit(&[2, h, w], rng);
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.avg_pool2(v[0])?;
                weighted(t, o, &wr)
            });
            (vec![x], b)
        }
        "blur_valid" => {
            let k = rng.random_range(1..4usize);
            let (h, w) = (k + rng.random_range(0..4usize), k + rng.random_range(0..4usize));
            let kernel: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let wr: Vec<f32> = (0..2 * (h + 1 - k) * (w + 1 - k)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = unit(&[2, h, w], rng);
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.blur_valid(v[0], &kernel)?;
                weighted(t, o, &wr)
            });
            (vec![x], b)
        }
        "conv2d" => {
            let (bn, cin, cout) = (rng.random_range(1..3usize), rng.random_range(1..4usize), rng.random_range(1..4usize));
            let k = rng.random_range(1..4usize);
            let stride = rng.random_range(1..3usize);
            let pad = rng.random_range(0..2usize);
            let (h, w) = (k + rng.random_range(0..4usize), k + rng.random_range(0..4usize));
            let geom = crate::ConvGeom::new(cin, h, w, k, stride, pad).unwrap();
            let out_n = bn * cout * geom.out_height * geom.out_width;
            let wr: Vec<f32> = (0..out_n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = vec![
                unit(&[bn, cin, h, w], rng),
                unit(&[cout, cin, k, k], rng),
                unit(&[cout], rng),
            ];
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted(t, o, &wr)
            });
            (inputs, b)
        }
        "conv_transpose2d" => {
            let (bn, cin, cout) = (rng.random_range(1..3usize), rng.random_range(1..4usize), rng.random_range(1..4usize));
            let k = rng.random_range(2..5usize);
            let stride = rng.random_range(1..3usize);
            let pad = if k > 2 { rng.random_range(0..2usize) } else { 0 };
            let (h, w) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
            let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad);
            let wr: Vec<f32> = (0..bn * cout * oh * ow).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = vec![
                unit(&[bn, cin, h, w], rng),
                unit(&[cin, cout, k, k], rng),
                unit(&[cout], rng),
            ];
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted(t, o, &wr)
            });
            (inputs, b)
        }
        "linear" => {
            let (r, k, o) = (rng.random_range(1..4usize), rng.random_range(1..5usize), rng.random_range(1..4usize));
            let wr: Vec<f32> = (0..r * o).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = vec![unit(&[r, k], rng), unit(&[o, k], rng), unit(&[o], rng)];
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let out = t.linear(v[0], v[1], Some(v[2]))?;
                weighted(t, out, &wr)
            });
            (inputs, b)
        }
        "bce_with_logits" => {
            let targets: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let x = Tensor::uniform(shape.clone(), -3.0, 3.0, rng);
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| t.bce_with_logits(v[0], &targets));
            (vec![x], b)
        }
        "cross_entropy_rows" => {
            let targets: Vec<Option<usize>> = (0..rows)
                .map(|_| if rng.random_range(0..4) == 0 { None } else { Some(rng.random_range(0..cols)) })
                .collect();
            let x = Tensor::uniform(shape.clone(), -3.0, 3.0, rng);
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy_rows(v[0], &targets));
            (vec![x], b)
        }
        "smooth_l1_rows" => {
            let beta = if rng.random::<bool>() { 1.0 } else { 0.0 };
            let target: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Keep every residual clear of the |z| = beta and z = 0 kinks.
            let pred: Vec<f32> = target
                .iter()
                .map(|&t| {
                    let mag = if rng.random::<bool>() { rng.random_range(0.1..0.8) } else { rng.random_range(1.2..2.0) };
                    t + if rng.random::<bool>() { mag } else { -mag }
                })
                .collect();
            let weight: Vec<f32> = (0..rows).map(|_| rng.random_range(0..2) as f32).collect();
            let x = Tensor::new(shape.clone(), pred).unwrap();
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| t.smooth_l1_rows(v[0], &target, &weight, beta));
            (vec![x], b)
        }
        "crop_and_resize" => {
            let (c, h, w) = (rng.random_range(1..3usize), rng.random_range(2..6usize), rng.random_range(2..6usize));
            let size = rng.random_range(1..4usize);
            let nb = rng.random_range(1..3usize);
            let boxes: Vec<[f32; 4]> = (0..nb)
                .map(|_| {
                    let x1 = rng.random_range(0.0..w as f32 / 2.0);
                    let y1 = rng.random_range(0.0..h as f32 / 2.0);
                    [x1, y1, x1 + rng.random_range(0.5..w as f32 / 2.0), y1 + rng.random_range(0.5..h as f32 / 2.0)]
                })
                .collect();
            let wr: Vec<f32> = (0..nb * c * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = unit(&[c, h, w], rng);
            let b: Builder = Box::new(move |t: &mut Tape, v: &[Var]| {
                let o = t.crop_and_resize(v[0], &boxes, size)?;
                weighted(t, o, &wr)
            });
            (vec![x], b)
        }
        other => panic!("no gradient-check generator for {other}"),
    }
}

/// Every differentiable operation kind the tape supports.
pub const OP_KINDS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "square",
    "abs",
    "powf",
    "clamp_min",
    "leaky_relu",
    "tanh",
    "dropout",
    "sum",
    "mean",
    "mean_rows",
    "reshape",
    "gather",
    "pad_replicate",
    "avg_pool2",
    "blur_valid",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "bce_with_logits",
    "cross_entropy_rows",
    "smooth_l1_rows",
    "crop_and_resize",
];

/// Finite-difference checks of every op kind on `instances` random inputs each.
pub fn standard_suite(seed: u64, instances: usize, h: f32) -> Result<Vec<OpCheck>> {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    OP_KINDS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (inputs, build) = instance(op, &mut rng);
                let report = check(&inputs, h, build)?;
                worst = worst.max(report.relative_error());
            }
            Ok(OpCheck {
                op,
                instances,
                max_relative_error: worst,
            })
        })
        .collect()
}
