use edgegrasp::grasp::anchors::generate_anchors;
use edgegrasp::grasp::rect::{angle_difference, box_iou};
use edgegrasp::grasp::{
    angle_to_bin, assign_anchor_targets, bin_to_angle, gcr_loss, gpn_loss, is_success, rect_iou, AnchorConfig, AnchorLabel,
    DetectorConfig, DetectorModel, GraspRect, OrientationBin, RegressionLoss, NUM_CLASSES,
};
use edgegrasp::synth;
use edgegrasp_tensor::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rect() -> impl Strategy<Value = GraspRect> {
    (10.0f32..60.0, 10.0f32..60.0, 4.0f32..40.0, 4.0f32..40.0, -180.0f32..180.0)
        .prop_map(|(x, y, w, h, t)| GraspRect::new(x, y, w, h, t).unwrap())
}

/// Area overlap by sampling cell centres on a fine grid.
fn raster_iou(a: &GraspRect, b: &GraspRect, step: f64) -> f64 {
    let inside = |r: &GraspRect, px: f64, py: f64| {
        let t = (r.theta() as f64).to_radians();
        let (dx, dy) = (px - r.x() as f64, py - r.y() as f64);
        let u = dx * t.cos() + dy * t.sin();
        let v = -dx * t.sin() + dy * t.cos();
        u.abs() <= r.w() as f64 / 2.0 && v.abs() <= r.h() as f64 / 2.0
    };
    let (mut both, mut either) = (0u64, 0u64);
    let mut py = -20.0 + step / 2.0;
    while py < 100.0 {
        let mut px = -20.0 + step / 2.0;
        while px < 100.0 {
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
            px += step;
        }
        py += step;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_in_range(a in rect(), b in rect()) {
        let ab = rect_iou(&a, &b);
        prop_assert!((ab - rect_iou(&b, &a)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((rect_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_agrees_with_raster(a in rect(), b in rect()) {
        let exact = rect_iou(&a, &b);
        let approx = raster_iou(&a, &b, 0.25);
        prop_assert!((exact - approx).abs() < 0.03, "{exact} vs {approx}");
    }

    #[test]
    fn half_turn_changes_nothing(a in rect(), b in rect()) {
        let flipped = GraspRect::new(a.x(), a.y(), a.w(), a.h(), a.theta() + 180.0).unwrap();
        prop_assert!((rect_iou(&a, &b) - rect_iou(&flipped, &b)).abs() < 1e-6);
        prop_assert_eq!(is_success(&a, &[b]).unwrap(), is_success(&flipped, &[b]).unwrap());
        prop_assert_eq!(angle_to_bin(a.theta()).unwrap(), angle_to_bin(a.theta() + 180.0).unwrap());
    }

    #[test]
    fn success_needs_both_overlap_and_orientation(a in rect(), b in rect()) {
        let expected = angle_difference(a.theta(), b.theta()) <= 30.0 && rect_iou(&a, &b) > 0.25;
        prop_assert_eq!(is_success(&a, &[b]).unwrap(), expected);
    }

    #[test]
    fn no_grasp_rows_never_move_the_configuration_loss(
        seed in any::<u64>(),
        bins in prop::collection::vec(0usize..NUM_CLASSES, 1..6),
        junk in -50.0f32..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = bins.len();
        let logits = edgegrasp_tensor::Tensor::randn(vec![p, NUM_CLASSES], 1.0, &mut rng);
        let refine = edgegrasp_tensor::Tensor::randn(vec![p, NUM_CLASSES * 4], 1.0, &mut rng);
        let truth: Vec<OrientationBin> = bins.iter().map(|&b| OrientationBin::new(b).unwrap()).collect();
        let offsets: Vec<[f32; 4]> = (0..p).map(|i| [i as f32 * 0.1, 0.2, -0.3, 0.4]).collect();
        let loss = |refine: &edgegrasp_tensor::Tensor, offsets: &[[f32; 4]]| {
            let mut tape = Tape::new();
            let l = tape.leaf(&logits);
            let r = tape.leaf(refine);
            let v = gcr_loss(&mut tape, l, r, &truth, offsets, 1.0, RegressionLoss::SmoothL1).unwrap();
            tape.scalar(v)
        };
        let base = loss(&refine, &offsets);
        let mut moved = refine.clone();
        let mut moved_offsets = offsets.clone();
        for (row, b) in truth.iter().enumerate() {
            if b.is_no_grasp() {
                for v in &mut moved.data_mut()[row * NUM_CLASSES * 4..(row + 1) * NUM_CLASSES * 4] {
                    *v += junk;
                }
                moved_offsets[row] = [junk; 4];
            } else {
                // Refinements of classes other than the true one are also ignored.
                let keep = b.index();
                for c in (0..NUM_CLASSES).filter(|&c| c != keep) {
                    for d in 0..4 {
                        moved.data_mut()[row * NUM_CLASSES * 4 + c * 4 + d] += junk;
                    }
                }
            }
        }
        prop_assert_eq!(base.to_bits(), loss(&moved, &moved_offsets).to_bits());
    }

    #[test]
    fn unscored_anchors_never_move_the_proposal_loss(seed in any::<u64>(), junk in -50.0f32..50.0) {
        let anchors = generate_anchors(&AnchorConfig::default(), (6, 5), (96, 80));
        let truths = [GraspRect::new(40.0, 50.0, 30.0, 14.0, 20.0).unwrap()];
        let set = assign_anchor_targets(&anchors, &truths, &AnchorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = set.len();
        let logits = edgegrasp_tensor::Tensor::randn(vec![n, 2], 1.0, &mut rng);
        let deltas = edgegrasp_tensor::Tensor::randn(vec![n, 4], 1.0, &mut rng);
        let loss = |logits: &edgegrasp_tensor::Tensor, deltas: &edgegrasp_tensor::Tensor| {
            let mut tape = Tape::new();
            let l = tape.leaf(logits);
            let d = tape.leaf(deltas);
            let v = gpn_loss(&mut tape, &set, l, d, 1.0, RegressionLoss::SmoothL1).unwrap();
            tape.scalar(v)
        };
        let base = loss(&logits, &deltas);
        let (mut l2, mut d2) = (logits.clone(), deltas.clone());
        for (i, label) in set.labels.iter().enumerate() {
            match label {
                AnchorLabel::Positive => {}
                AnchorLabel::Negative => d2.data_mut()[i * 4..i * 4 + 4].iter_mut().for_each(|v| *v += junk),
                AnchorLabel::Ignored => {
                    l2.data_mut()[i * 2..i * 2 + 2].iter_mut().for_each(|v| *v += junk);
                    d2.data_mut()[i * 4..i * 4 + 4].iter_mut().for_each(|v| *v += junk);
                }
            }
        }
        prop_assert_eq!(base.to_bits(), loss(&l2, &d2).to_bits());
    }
}

#[test]
fn every_bin_centre_maps_back_to_its_bin() {
    for k in 1..=20 {
        let bin = OrientationBin::new(k).unwrap();
        let centre = bin_to_angle(bin).unwrap();
        assert_eq!(angle_to_bin(centre).unwrap(), bin);
        assert_eq!(angle_to_bin(centre + 180.0).unwrap(), bin);
        assert_eq!(angle_to_bin(centre - 360.0).unwrap(), bin);
    }
    assert!(bin_to_angle(OrientationBin::NO_GRASP).is_err());
    assert!(OrientationBin::new(NUM_CLASSES).is_err());
}

#[test]
fn matcher_agrees_with_brute_force() {
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&cfg, (7, 5), (105, 75));
    for scene in synth::grasp_scenes(6, 31) {
        let set = assign_anchor_targets(&anchors, &scene.truths, &cfg);
        let hulls: Vec<[f32; 4]> = scene.truths.iter().map(GraspRect::hull).collect();
        let best = |i: usize| hulls.iter().map(|h| box_iou(&anchors[i], h)).fold(0.0f32, f32::max);
        let forced: Vec<usize> = hulls
            .iter()
            .filter_map(|h| {
                let ious: Vec<f32> = anchors.iter().map(|a| box_iou(a, h)).collect();
                let max = ious.iter().copied().fold(0.0f32, f32::max);
                (max > 0.0).then(|| ious.iter().position(|&v| v == max).unwrap())
            })
            .collect();
        for i in 0..anchors.len() {
            let expected = if best(i) >= cfg.positive_iou || forced.contains(&i) {
                AnchorLabel::Positive
            } else if best(i) < cfg.negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            };
            assert_eq!(set.labels[i], expected, "anchor {i}");
            assert_eq!(set.matched[i].is_some(), expected == AnchorLabel::Positive);
        }
    }
}

#[test]
fn detection_is_ordered_and_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = DetectorModel::new(DetectorConfig::default(), &mut rng).unwrap();
    for scene in synth::grasp_scenes(3, 9) {
        let a = model.detect(&scene.image).unwrap();
        let b = model.detect(&scene.image).unwrap();
        assert_eq!(a, b);
        for pair in a.windows(2) {
            assert!(pair[0].confidence >= pair[1].confidence);
            if pair[0].confidence == pair[1].confidence {
                assert!(pair[0].anchor_index < pair[1].anchor_index);
            }
        }
        for c in &a {
            assert!(!c.bin.is_no_grasp());
            assert!((0.0..=1.0).contains(&c.confidence));
        }
    }
}
