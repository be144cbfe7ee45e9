use edgegrasp::metrics::{ms_ssim, psnr, ssim, MsSsimParams, Psnr, SsimParams};
use edgegrasp_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_pair(seed: u64, h: usize, w: usize, noise: f32) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::uniform(vec![1, h, w], 0.0, 255.0, &mut rng);
    let b: Vec<f32> = a
        .data()
        .iter()
        .map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 255.0))
        .collect();
    (a, Tensor::new(vec![1, h, w], b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), noise in 0.0f32..120.0) {
        let (a, b) = noisy_pair(seed, 24, 20, noise);
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p).unwrap();
        let ba = ssim(&b, &a, &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_is_symmetric_and_bounded(seed in any::<u64>(), noise in 0.0f32..120.0) {
        let (a, b) = noisy_pair(seed, 48, 48, noise);
        let p = MsSsimParams::default();
        let ab = ms_ssim(&a, &b, &p).unwrap();
        let ba = ms_ssim(&b, &a, &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ms_ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>()) {
        let mut last = f64::INFINITY;
        for noise in [2.0f32, 8.0, 32.0, 96.0] {
            let (a, b) = noisy_pair(seed, 16, 16, noise);
            let db = psnr(&a, &b, 255.0).unwrap().decibels().unwrap();
            prop_assert!(db < last, "{db} after {last}");
            last = db;
        }
    }
}

#[test]
fn identical_images_are_a_perfect_match() {
    let (a, _) = noisy_pair(1, 8, 8, 0.0);
    assert_eq!(psnr(&a, &a, 255.0).unwrap(), Psnr::PerfectMatch);
}

#[test]
fn psnr_of_a_constant_offset() {
    let a = Tensor::full(vec![3, 4, 5], 100.0);
    let b = Tensor::full(vec![3, 4, 5], 110.0);
    let expected = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
    let got = psnr(&a, &b, 255.0).unwrap().decibels().unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn ssim_of_constant_images_matches_luminance_term() {
    // Flat images have no variance, so only the luminance term survives.
    let p = SsimParams::default();
    let a = Tensor::full(vec![1, 16, 16], 50.0);
    let b = Tensor::full(vec![1, 16, 16], 150.0);
    let c1 = p.c1();
    let expected = (2.0 * 50.0 * 150.0 + c1) / (50.0f64.powi(2) + 150.0f64.powi(2) + c1);
    let got = ssim(&a, &b, &p).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}
