//! Differentiable training objectives.

use edgegrasp_tensor::{Tape, Var};

use super::GanError;
use crate::metrics::MsSsimParams;

/// Lower bound applied to per-scale means before exponentiation.
const SCALE_FLOOR: f32 = 1e-4;

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<(), GanError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(GanError::ShapeMismatch(tape.shape(a).to_vec(), tape.shape(b).to_vec()));
    }
    Ok(())
}

/// Mean MS-SSIM over every image plane of two `…×H×W` tensors whose values
/// are on the scale of `params.ssim.dynamic_range`.
pub fn ms_ssim_var(tape: &mut Tape, a: Var, b: Var, params: &MsSsimParams) -> Result<Var, GanError> {
    check_same(tape, a, b)?;
    let shape = tape.shape(a).to_vec();
    if shape.len() < 2 {
        return Err(GanError::ShapeMismatch(shape.clone(), shape));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let kernel: Vec<f32> = params.ssim.window_1d().into_iter().map(|v| v as f32).collect();
    let (c1, c2) = (params.ssim.c1() as f32, params.ssim.c2() as f32);
    let (mut x, mut y) = (tape.reshape(a, vec![planes, h, w])?, tape.reshape(b, vec![planes, h, w])?);
    let m = params.weights.len();
    let mut product: Option<Var> = None;
    for (j, &wj) in params.weights.iter().enumerate() {
        let mu_x = tape.blur_valid(x, &kernel)?;
        let mu_y = tape.blur_valid(y, &kernel)?;
        let xx = tape.square(x);
        let yy = tape.square(y);
        let xy = tape.mul(x, y)?;
        let e_xx = tape.blur_valid(xx, &kernel)?;
        let e_yy = tape.blur_valid(yy, &kernel)?;
        let e_xy = tape.blur_valid(xy, &kernel)?;
        let mx2 = tape.square(mu_x);
        let my2 = tape.square(mu_y);
        let mxy = tape.mul(mu_x, mu_y)?;
        let var_x = tape.sub(e_xx, mx2)?;
        let var_y = tape.sub(e_yy, my2)?;
        let cov = tape.sub(e_xy, mxy)?;
        let num = tape.scale(cov, 2.0);
        let num = tape.add_scalar(num, c2);
        let den = tape.add(var_x, var_y)?;
        let den = tape.add_scalar(den, c2);
        let mut map = tape.div(num, den)?;
        if j + 1 == m {
            let ln = tape.scale(mxy, 2.0);
            let ln = tape.add_scalar(ln, c1);
            let ld = tape.add(mx2, my2)?;
            let ld = tape.add_scalar(ld, c1);
            let lum = tape.div(ln, ld)?;
            map = tape.mul(lum, map)?;
        }
        let shape = tape.shape(map).to_vec();
        let per_plane = tape.mean_rows(map, shape[1] * shape[2])?;
        let clamped = tape.clamp_min(per_plane, SCALE_FLOOR);
        let factor = tape.powf(clamped, wj as f32);
        product = Some(match product {
            None => factor,
            Some(p) => tape.mul(p, factor)?,
        });
        if j + 1 < m {
            x = tape.avg_pool2(x)?;
            y = tape.avg_pool2(y)?;
        }
    }
    let product = product.ok_or_else(|| GanError::InvalidConfig("MS-SSIM needs at least one scale".into()))?;
    Ok(tape.mean(product))
}

/// Mean binary cross-entropy with target 1 for real and 0 for fake logits.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var, GanError> {
    let (nr, nf) = (tape.value(d_real).len(), tape.value(d_fake).len());
    if nr == 0 || nr != nf {
        return Err(GanError::BatchMismatch { real: nr, fake: nf });
    }
    let real = tape.bce_with_logits(d_real, &vec![1.0; nr])?;
    let fake = tape.bce_with_logits(d_fake, &vec![0.0; nf])?;
    let sum = tape.add(real, fake)?;
    Ok(tape.scale(sum, 0.5))
}

/// `λ_adv·BCE(d_fake, 1) + α·(1 − MS-SSIM) + (1 − α)·L1`.
///
/// `recon` and `target` are in `[−1, 1]`; MS-SSIM is taken after mapping
/// them to `[0, 1]`, so `params` should use a dynamic range of 1. Terms with
/// zero weight are not evaluated.
pub fn generator_loss(
    tape: &mut Tape,
    recon: Var,
    target: Var,
    d_fake: Var,
    alpha_mix: f32,
    lambda_adv: f32,
    params: &MsSsimParams,
) -> Result<Var, GanError> {
    check_same(tape, recon, target)?;
    if !(0.0..=1.0).contains(&alpha_mix) || lambda_adv < 0.0 || !lambda_adv.is_finite() {
        return Err(GanError::InvalidConfig(format!("alpha_mix {alpha_mix}, lambda_adv {lambda_adv}")));
    }
    let mut terms = Vec::new();
    if lambda_adv > 0.0 {
        let n = tape.value(d_fake).len();
        let adv = tape.bce_with_logits(d_fake, &vec![1.0; n])?;
        terms.push(tape.scale(adv, lambda_adv));
    }
    if alpha_mix > 0.0 {
        let r = tape.scale(recon, 0.5);
        let r = tape.add_scalar(r, 0.5);
        let t = tape.scale(target, 0.5);
        let t = tape.add_scalar(t, 0.5);
        let ms = ms_ssim_var(tape, r, t, params)?;
        let one_minus = tape.scale(ms, -1.0);
        let one_minus = tape.add_scalar(one_minus, 1.0);
        terms.push(tape.scale(one_minus, alpha_mix));
    }
    if alpha_mix < 1.0 {
        let d = tape.sub(recon, target)?;
        let d = tape.abs(d);
        let l1 = tape.mean(d);
        terms.push(tape.scale(l1, 1.0 - alpha_mix));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Metric parameters matching [`generator_loss`]'s `[0, 1]` mapping.
pub fn unit_range_params() -> MsSsimParams {
    let mut p = MsSsimParams::default();
    p.ssim.dynamic_range = 1.0;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ms_ssim, MsSsimParams};
    use edgegrasp_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bce(x: f64, t: f64) -> f64 {
        let p = 1.0 / (1.0 + (-x).exp());
        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
    }

    #[test]
    fn discriminator_examples() {
        let mut tape = Tape::new();
        let r = tape.constant(vec![2, 1], vec![60.0, 60.0]).unwrap();
        let f = tape.constant(vec![2, 1], vec![-60.0, -60.0]).unwrap();
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        assert!(tape.scalar(l) < 1e-12);
        let z = tape.constant(vec![3, 1], vec![0.0; 3]).unwrap();
        let l = discriminator_loss(&mut tape, z, z).unwrap();
        assert!((tape.scalar(l) - std::f32::consts::LN_2).abs() < 1e-6);
        let r = tape.constant(vec![2, 1], vec![0.7, -1.2]).unwrap();
        let f = tape.constant(vec![2, 1], vec![0.3, 2.0]).unwrap();
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        let expected = (bce(0.7, 1.0) + bce(-1.2, 1.0) + bce(0.3, 0.0) + bce(2.0, 0.0)) / 4.0;
        assert!((tape.scalar(l) as f64 - expected).abs() < 1e-6);
        let one = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(discriminator_loss(&mut tape, r, one), Err(GanError::BatchMismatch { .. })));
    }

    fn image(seed: u64) -> Tensor {
        Tensor::uniform(vec![1, 3, 48, 48], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn generator_fixed_point_and_degenerate_weights() {
        let params = unit_range_params();
        let x = image(1);
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&x);
        let fooled = tape.constant(vec![1, 1], vec![60.0]).unwrap();
        let l = generator_loss(&mut tape, a, b, fooled, 0.84, 0.01, &params).unwrap();
        assert!(tape.scalar(l).abs() < 1e-6, "{}", tape.scalar(l));

        let y = image(2);
        let c = tape.leaf(&y);
        let d = tape.constant(vec![1, 1], vec![0.4]).unwrap();
        let only_ms = generator_loss(&mut tape, a, c, d, 1.0, 0.0, &params).unwrap();
        let r = tape.scale(a, 0.5);
        let r = tape.add_scalar(r, 0.5);
        let t = tape.scale(c, 0.5);
        let t = tape.add_scalar(t, 0.5);
        let ms = ms_ssim_var(&mut tape, r, t, &params).unwrap();
        assert_eq!(tape.scalar(only_ms), 1.0 - tape.scalar(ms));

        let no_ms = generator_loss(&mut tape, a, c, d, 0.0, 0.5, &params).unwrap();
        let mae: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64;
        let expected = 0.5 * bce(0.4, 1.0) + mae;
        assert!((tape.scalar(no_ms) as f64 - expected).abs() < 1e-5);

        let wrong = tape.constant(vec![1, 3, 48, 47], vec![0.0; 3 * 48 * 47]).unwrap();
        assert!(matches!(
            generator_loss(&mut tape, a, wrong, d, 0.5, 0.5, &params),
            Err(GanError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn tape_ms_ssim_matches_metric() {
        let mut params = MsSsimParams::default();
        params.ssim.dynamic_range = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform(vec![2, 3, 48, 48], 0.0, 1.0, &mut rng);
        // Correlated pair so every per-scale term stays positive.
        let data: Vec<f32> = a.data().iter().map(|v| (0.8 * v + 0.1 + 0.05 * ((v * 1e4).sin())).clamp(0.0, 1.0)).collect();
        let b = Tensor::new(a.shape().to_vec(), data).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let ms = ms_ssim_var(&mut tape, va, vb, &params).unwrap();
        let got = tape.scalar(ms) as f64;
        let mut expected = 0.0;
        for (x, y) in a.unstack().iter().zip(b.unstack().iter()) {
            expected += ms_ssim(x, y, &params).unwrap();
        }
        expected /= 2.0;
        assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
    }
}
