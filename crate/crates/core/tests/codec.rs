use edgegrasp::codec::{load_checkpoint, save_checkpoint, CodecConfig, CodecModel, Latent};
use edgegrasp::gan::{generator_loss, unit_range_params, Discriminator, DiscriminatorConfig};
use edgegrasp::synth;
use edgegrasp_tensor::{Adam, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: [usize; 3] = [3, 96, 64];

fn small() -> CodecConfig {
    CodecConfig {
        input_shape: SMALL,
        ..CodecConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_doubles_with_latent_channels(
        h in 8usize..300, w in 8usize..300, extra in 0usize..2, k in 0usize..4,
    ) {
        let narrow = CodecConfig {
            input_shape: [3, h, w],
            latent_channels: [1, 2, 4, 8][k],
            extra_downsample_stages: extra,
            ..CodecConfig::default()
        };
        let wide = CodecConfig { latent_channels: narrow.latent_channels * 2, ..narrow };
        prop_assert_eq!(wide.compression_ratio().unwrap(), 2.0 * narrow.compression_ratio().unwrap());
        let [c, lh, lw] = narrow.latent_shape().unwrap();
        prop_assert_eq!(c, narrow.latent_channels);
        prop_assert!(lh >= 1 && lw >= 1 && lh <= h / 4 && lw <= w / 4);
    }

    #[test]
    fn decoded_pixels_stay_in_range(seed in any::<u64>(), scale in 0.1f32..50.0) {
        let model = CodecModel::from_seed(small(), seed % 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Latent {
            tensor: Tensor::randn(model.latent_shape().to_vec(), scale, &mut rng),
            model_id: model.model_id(),
        };
        let out = model.decode(&latent).unwrap();
        prop_assert_eq!(out.shape(), &SMALL[..]);
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn default_latent_sizes() {
    for c in [1, 2, 4, 8, 16] {
        let cfg = CodecConfig::with_latent_channels(c);
        assert_eq!(cfg.latent_shape().unwrap(), [c, 52, 37]);
        let ratio = cfg.compression_ratio().unwrap();
        assert!((ratio - 100.0 * (c * 52 * 37) as f64 / 94_500.0).abs() < 1e-12);
    }
}

#[test]
fn same_seed_same_model_and_outputs() {
    let a = CodecModel::from_seed(small(), 5).unwrap();
    let b = CodecModel::from_seed(small(), 5).unwrap();
    assert_eq!(a, b);
    let images = synth::codec_images(2, (96, 64), 3);
    assert_eq!(a.reconstruct(&images).unwrap(), b.reconstruct(&images).unwrap());
    assert_ne!(a.model_id(), CodecModel::from_seed(small(), 6).unwrap().model_id());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.gwm");
    let model = CodecModel::from_seed(small(), 9).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.model_id(), model.model_id());
    let img = synth::codec_images(1, (96, 64), 1).remove(0);
    assert_eq!(back.encode(&img).unwrap(), model.encode(&img).unwrap());
}

fn structural_loss(model: &CodecModel, batch: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let ep = tape.bind(&model.encoder.params, false);
    let dp = tape.bind(&model.decoder.params, false);
    let x = tape.leaf(batch);
    let z = model.encoder.forward(&mut tape, &ep, x).unwrap();
    let y = model.decoder.forward(&mut tape, &dp, z).unwrap();
    let d = tape.constant(vec![batch.shape()[0], 1], vec![0.0; batch.shape()[0]]).unwrap();
    let l = generator_loss(&mut tape, y, x, d, 0.84, 0.0, &unit_range_params()).unwrap();
    tape.scalar(l)
}

#[test]
fn one_small_generator_step_lowers_the_structural_loss() {
    let mut model = CodecModel::from_seed(small(), 2).unwrap();
    let images = synth::codec_images(4, (96, 64), 17);
    let batch = Tensor::stack(&images.iter().collect::<Vec<_>>()).unwrap();
    let before = structural_loss(&model, &batch);

    let mut tape = Tape::new();
    let ep = tape.bind(&model.encoder.params, true);
    let dp = tape.bind(&model.decoder.params, true);
    let x = tape.leaf(&batch);
    let z = model.encoder.forward(&mut tape, &ep, x).unwrap();
    let y = model.decoder.forward(&mut tape, &dp, z).unwrap();
    let d = tape.constant(vec![4, 1], vec![0.0; 4]).unwrap();
    let l = generator_loss(&mut tape, y, x, d, 0.84, 0.0, &unit_range_params()).unwrap();
    tape.backward(l).unwrap();
    tape.write_grads(&ep, &mut model.encoder.params).unwrap();
    tape.write_grads(&dp, &mut model.decoder.params).unwrap();
    Adam::new(1e-5).step(&mut model.encoder.params).unwrap();
    Adam::new(1e-5).step(&mut model.decoder.params).unwrap();

    let after = structural_loss(&model, &batch);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn generator_loss_reaches_every_codec_parameter() {
    let model = CodecModel::from_seed(small(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let disc = Discriminator::new(
        DiscriminatorConfig {
            input_shape: SMALL,
            ..DiscriminatorConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let pool = synth::codec_images(24, (96, 64), 5);
    let names: Vec<String> = model
        .encoder
        .params
        .names()
        .iter()
        .chain(model.decoder.params.names())
        .map(|n| n.to_string())
        .collect();
    let mut touched = vec![false; names.len()];
    for _ in 0..10 {
        let picks = sample(&mut rng, pool.len(), 3);
        let batch = Tensor::stack(&picks.iter().map(|i| &pool[i]).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let ep = tape.bind(&model.encoder.params, true);
        let dp = tape.bind(&model.decoder.params, true);
        let gp = tape.bind(&disc.params, false);
        let x = tape.leaf(&batch);
        let z = model.encoder.forward(&mut tape, &ep, x).unwrap();
        let y = model.decoder.forward(&mut tape, &dp, z).unwrap();
        let d = disc.forward(&mut tape, &gp, y, true, &mut rng).unwrap();
        let l = generator_loss(&mut tape, y, x, d, 0.84, 0.01, &unit_range_params()).unwrap();
        tape.backward(l).unwrap();
        let mut enc = model.encoder.params.clone();
        let mut dec = model.decoder.params.clone();
        tape.write_grads(&ep, &mut enc).unwrap();
        tape.write_grads(&dp, &mut dec).unwrap();
        for (slot, t) in touched.iter_mut().zip(enc.tensors().iter().chain(dec.tensors())) {
            *slot |= t.grad().unwrap().iter().any(|g| *g != 0.0);
        }
    }
    let dead: Vec<&String> = names.iter().zip(&touched).filter(|(_, t)| !**t).map(|(n, _)| n).collect();
    assert!(dead.is_empty(), "no gradient reached {dead:?}");
}
