use edgegrasp_tensor::gradcheck::{self, OP_KINDS};
use edgegrasp_tensor::{Adam, ParamStore, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 1, 1], &[0.37]));
    let w = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.leaf(&t(&[1], &[0.0]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1]);
    assert_eq!(tape.value(y), &[0.37]);
}

#[test]
fn conv2d_codec_shapes() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![3, 210, 150]));
    let w = tape.leaf(&Tensor::zeros(vec![5, 3, 4, 4]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[5, 105, 75]);
    let w2 = tape.leaf(&Tensor::zeros(vec![7, 5, 4, 4]));
    let z = tape.conv2d(y, w2, None, 2, 1).unwrap();
    assert_eq!(tape.shape(z), &[7, 52, 37]);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![3, 8, 8]));
    let w = tape.leaf(&Tensor::zeros(vec![2, 4, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    match err {
        TensorError::Shape { detail, .. } => {
            assert!(detail.contains('4') && detail.contains('3'), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn conv_transpose_shapes_and_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![6, 52, 37]));
    let w = tape.leaf(&Tensor::zeros(vec![6, 4, 4, 4]));
    let y = tape.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[4, 104, 74]);
    let y = tape.pad_replicate(y, 105, 75).unwrap();
    assert_eq!(tape.shape(y), &[4, 105, 75]);
    let w2 = tape.leaf(&Tensor::zeros(vec![4, 3, 4, 4]));
    let z = tape.conv_transpose2d(y, w2, None, 2, 1).unwrap();
    assert_eq!(tape.shape(z), &[3, 210, 150]);

    let v = tape.leaf(&t(&[1, 1, 1], &[-1.25]));
    let unit = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
    let out = tape.conv_transpose2d(v, unit, None, 1, 0).unwrap();
    assert_eq!(tape.value(out), &[-1.25]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> for the same kernel and geometry.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(vec![2, 8, 6], -1.0, 1.0, &mut rng);
    let k = Tensor::uniform(vec![3, 2, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let kv = tape.leaf(&k);
    let cx = tape.conv2d(xv, kv, None, 2, 1).unwrap();
    let shape = tape.shape(cx).to_vec();
    let y = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    let yv = tape.leaf(&y);
    // A C_out×C_in×k×k conv kernel reads as a C_in'×C_out'×k×k transposed kernel.
    let ty = tape.conv_transpose2d(yv, kv, None, 2, 1).unwrap();
    assert_eq!(tape.shape(ty), &[2, 8, 6]);
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
    let lhs = dot(tape.value(cx), y.data());
    let rhs = dot(x.data(), tape.value(ty));
    assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 3.0]));
    let l = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(l), &[-0.2, 0.0, 3.0]);
    let th = tape.tanh(x);
    assert_eq!(tape.value(th)[1], 0.0);
    let big = tape.leaf(&t(&[2], &[-8.0, 8.0]));
    let tb = tape.tanh(big);
    assert!(tape.value(tb).iter().all(|v| v.abs() < 1.0));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let e = tape.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(tape.value(e), &[1.0, 2.0, 3.0, 4.0]);
    let z = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(tape.value(z), &[1.0, 2.0, 3.0, 4.0]);
    assert!(matches!(
        tape.dropout(x, 1.0, true, &mut rng),
        Err(TensorError::InvalidArgument { .. })
    ));
}

#[test]
fn dropout_mean_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(vec![100_000], 1.0));
    let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let mean: f64 = tape.value(d).iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn dropout_deterministic_under_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![256], 1.0));
        let d = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        tape.value(d).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::new();
    let a = tape.param(&t(&[1], &[3.0]));
    let c = tape.mul(a, a).unwrap();
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[6.0]);
}

#[test]
fn conv_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        Tensor::uniform(vec![2, 4, 6, 6], -1.0, 1.0, &mut rng),
        Tensor::uniform(vec![3, 4, 3, 3], -0.5, 0.5, &mut rng),
        Tensor::uniform(vec![3], -0.5, 0.5, &mut rng),
        Tensor::uniform(vec![3, 2, 4, 4], -0.5, 0.5, &mut rng),
    ];
    let weights: Vec<f32> = (0..2 * 2 * 6 * 6).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
    let report = gradcheck::check(&inputs, 1e-3, |tape, v| {
        let h = tape.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let h = tape.tanh(h);
        let up = tape.conv_transpose2d(h, v[3], None, 2, 1)?;
        let up = tape.reshape(up, vec![2 * 2 * 6 * 6])?;
        let r = tape.constant(vec![2 * 2 * 6 * 6], weights.clone())?;
        let p = tape.mul(up, r)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(report.relative_error() < 1e-2, "{:?}", report.relative_errors);
}

#[test]
fn every_op_passes_gradient_check() {
    let results = gradcheck::standard_suite(2024, 20, 1e-3).unwrap();
    assert_eq!(results.len(), OP_KINDS.len());
    for r in &results {
        assert_eq!(r.instances, 20);
        assert!(r.max_relative_error < 1e-2, "{} failed: {}", r.op, r.max_relative_error);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::full(vec![5], 1.0));
    store.tensors_mut()[0].set_grad(Some(vec![1.0; 5])).unwrap();
    let mut adam = Adam::new(0.0002);
    adam.step(&mut store).unwrap();
    for &v in store.get(id).data() {
        assert!((v - (1.0 - 0.0002)).abs() < 1e-7, "{v}");
    }
    assert_eq!(adam.state.step, 1);
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut params = vec![0.5f32, -1.5];
    let mut adam = Adam::new(0.1);
    adam.step_with(&mut [&mut params[..]], &[&[0.0, 0.0]]).unwrap();
    assert_eq!(params, vec![0.5, -1.5]);
}

#[test]
fn adam_two_step_trace() {
    // Hand computation, g = 0.5, lr = 0.1:
    // t=1: m=0.05, v=0.00025, m̂=0.5, v̂=0.25 → step 0.1 → 0.9
    // t=2: m=0.095, v=0.00049975, m̂=0.095/0.19=0.5, v̂=0.00049975/0.001999=0.25 → 0.8
    let mut p = vec![1.0f32];
    let mut adam = Adam::new(0.1);
    adam.step_with(&mut [&mut p[..]], &[&[0.5]]).unwrap();
    assert!((p[0] - 0.9).abs() < 1e-6, "{}", p[0]);
    adam.step_with(&mut [&mut p[..]], &[&[0.5]]).unwrap();
    assert!((p[0] - 0.8).abs() < 1e-6, "{}", p[0]);
}

#[test]
fn adam_rejects_length_mismatch() {
    let mut p = vec![1.0f32, 2.0];
    let mut adam = Adam::new(0.1);
    assert!(adam.step_with(&mut [&mut p[..]], &[&[0.5]]).is_err());
    assert!(adam.step_with(&mut [&mut p[..]], &[]).is_err());
}

#[test]
fn bind_and_write_grads() {
    let mut store = ParamStore::new();
    store.add("a", t(&[2], &[1.0, 2.0]));
    store.add("unused", t(&[1], &[5.0]));
    let mut tape = Tape::new();
    let b = tape.bind(&store, true);
    let a = b.var(edgegrasp_tensor::ParamId(0));
    let sq = tape.square(a);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    tape.write_grads(&b, &mut store).unwrap();
    assert_eq!(store.tensors()[0].grad().unwrap(), &[2.0, 4.0]);
    assert_eq!(store.tensors()[1].grad().unwrap(), &[0.0]);
}

fn random_pass(seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(vec![2, 3, 9, 8], -1.0, 1.0, &mut rng);
    let w = Tensor::randn(vec![4, 3, 3, 3], 0.3, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.param(&w);
    let h = tape.conv2d(xv, wv, None, 2, 1).unwrap();
    let h = tape.dropout(h, 0.4, true, &mut rng).unwrap();
    let h = tape.leaky_relu(h, 0.2);
    let s = tape.mean(h);
    tape.backward(s).unwrap();
    (tape.value(h).to_vec(), tape.grad(wv).unwrap().to_vec())
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let (a, ga) = random_pass(5);
    let (b, gb) = random_pass(5);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn no_non_finite_values_from_finite_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10_000u32 {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::uniform(vec![1, 2, 5, 5], -4.0, 4.0, &mut rng));
        let y = match i % 10 {
            0 => tape.tanh(x),
            1 => tape.leaky_relu(x, 0.2),
            2 => tape.square(x),
            3 => tape.avg_pool2(x).unwrap(),
            4 => tape.blur_valid(x, &[0.25, 0.5, 0.25]).unwrap(),
            5 => {
                let w = tape.param(&Tensor::uniform(vec![2, 2, 3, 3], -1.0, 1.0, &mut rng));
                tape.conv2d(x, w, None, 1, 1).unwrap()
            }
            6 => {
                let w = tape.param(&Tensor::uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut rng));
                tape.conv_transpose2d(x, w, None, 2, 1).unwrap()
            }
            7 => tape.dropout(x, 0.5, true, &mut rng).unwrap(),
            8 => {
                let a = tape.abs(x);
                let a = tape.add_scalar(a, 0.5);
                tape.div(x, a).unwrap()
            }
            _ => {
                let r = tape.reshape(x, vec![5, 10]).unwrap();
                let targets: Vec<Option<usize>> = (0..5).map(|k| Some(k % 10)).collect();
                tape.cross_entropy_rows(r, &targets).unwrap()
            }
        };
        let s = tape.mean(y);
        tape.backward(s).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
        assert!(tape.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #[test]
    fn conv_shape_contract(h in 4usize..40, w in 4usize..40, k in 1usize..5, stride in 1usize..3, pad in 0usize..2) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, h, w]));
        let kern = tape.leaf(&Tensor::zeros(vec![2, 1, k, k]));
        let y = tape.conv2d(x, kern, None, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
        let kt = tape.leaf(&Tensor::zeros(vec![2, 1, k, k]));
        if k > 2 * pad {
            let z = tape.conv_transpose2d(y, kt, None, stride, pad).unwrap();
            let (oh, ow) = (tape.shape(y)[1], tape.shape(y)[2]);
            prop_assert_eq!(tape.shape(z), &[1, (oh - 1) * stride + k - 2 * pad, (ow - 1) * stride + k - 2 * pad]);
        }
    }
}
