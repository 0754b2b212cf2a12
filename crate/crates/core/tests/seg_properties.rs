mod common;

use camseg::model::seg_head::{gate_features, normalize_prior, predict_mask, seg_loss};
use camseg::model::{NormalizedPrior, PriorMap, SegmentationLogits};
use camseg_tensor::{Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn normalize(x: &Tensor) -> Vec<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let n = normalize_prior(&mut tape, PriorMap(v)).unwrap();
    tape.value(n.0).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn normalisation_is_affine_invariant(seed in any::<u64>(), m in 2i32..160, j in -80i32..80) {
        // dyadic grid values keep a·x + b exact in f32
        let mut r = rng(seed);
        let shape = [r.random_range(1..3), 1, r.random_range(2..6), r.random_range(2..6)];
        let x = Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1024i32..=1024) as f32 / 1024.0);
        let (a, b) = (m as f32 / 16.0, j as f32 / 16.0);
        let y = Tensor::from_fn(x.shape().to_vec(), |i| a * x.data()[i] + b);
        for (p, q) in normalize(&x).iter().zip(normalize(&y)) {
            prop_assert!((p - q).abs() <= 1e-6, "{p} {q}");
        }
    }

    #[test]
    fn normalised_prior_hits_both_ends(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random(&[1, 1, r.random_range(1..6), r.random_range(2..6)], &mut r);
        let n = normalize(&x);
        prop_assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(n.iter().cloned().fold(f32::MAX, f32::min), 0.0);
        prop_assert_eq!(n.iter().cloned().fold(f32::MIN, f32::max), 1.0);
    }

    #[test]
    fn gating_equals_concatenated_copies(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (c, h, w) = (r.random_range(1..9), r.random_range(1..5), r.random_range(1..5));
        let f = random(&[1, c, h, w], &mut r);
        let p = Tensor::from_fn([1, 1, h, w], |_| r.random_range(0.0f32..1.0));
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let pv = tape.constant(p);
        let gated = gate_features(&mut tape, fv, NormalizedPrior(pv)).unwrap();
        let copies = tape.concat_channels(&vec![pv; c]).unwrap();
        let literal = tape.mul(fv, copies).unwrap();
        let (g, l) = (tape.value(gated).data(), tape.value(literal).data());
        for ((x, y), orig) in g.iter().zip(l).zip(f.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
            prop_assert!(x.abs() <= orig.abs());
        }
    }

    #[test]
    fn prediction_ignores_common_offsets(seed in any::<u64>(), shift in -50i32..50) {
        let mut r = rng(seed);
        let logits = Tensor::from_fn([1, 2, 4, 5], |_| r.random_range(-8i32..=8) as f32 / 4.0);
        let shifted = Tensor::from_fn([1, 2, 4, 5], |i| logits.data()[i] + shift as f32);
        prop_assert_eq!(predict_mask(&logits).unwrap(), predict_mask(&shifted).unwrap());
    }

    #[test]
    fn raising_foreground_never_shrinks_the_mask(seed in any::<u64>(), c in 0.0f32..3.0) {
        let mut r = rng(seed);
        let logits = random(&[1, 2, 4, 4], &mut r);
        let raised = Tensor::from_fn([1, 2, 4, 4], |i| logits.data()[i] + if i >= 16 { c } else { 0.0 });
        let a = predict_mask(&logits).unwrap().remove(0);
        let b = predict_mask(&raised).unwrap().remove(0);
        for (x, y) in a.bits().iter().zip(b.bits()) {
            prop_assert!(!x || *y);
        }
    }
}

#[test]
fn constant_prior_normalises_to_one_half() {
    assert!(normalize(&Tensor::full([1, 1, 4, 4], 3.25)).iter().all(|&v| v == 0.5));
}

#[test]
fn loss_examples() {
    let gt = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let logits = Tensor::new(vec![1, 2, 2, 2], vec![0.3, -1.1, 2.0, 0.5, -0.7, 0.4, 1.5, 2.5]).unwrap();
    let mut expect = 0.0f64;
    for p in 0..4 {
        let (bg, fg) = (logits.data()[p] as f64, logits.data()[4 + p] as f64);
        let z = bg.exp() + fg.exp();
        let pick = if gt.data()[p] == 1.0 { fg } else { bg };
        expect -= (pick.exp() / z).ln();
    }
    expect /= 4.0;
    let mut tape = Tape::new();
    let v = tape.constant(logits);
    let l = seg_loss(&mut tape, SegmentationLogits(v), &gt).unwrap();
    assert!((tape.value(l).item().unwrap() as f64 - expect).abs() < 1e-6);

    let sharp = Tensor::from_fn([1, 2, 2, 2], |i| {
        let fg_here = gt.data()[i % 4] == 1.0;
        let is_fg_channel = i >= 4;
        if fg_here == is_fg_channel { 10.0 } else { -10.0 }
    });
    let v = tape.constant(sharp);
    let l = seg_loss(&mut tape, SegmentationLogits(v), &gt).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-4);
}
