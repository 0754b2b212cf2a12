mod common;

use camseg::model::cam::{aggregate_kshot, classification_loss, mask_support, query_prior};
use camseg::model::{ActivationStack, ClassLabelVector, ClassWeightVector};
use camseg_tensor::{Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn prior_of(maps: &Tensor, s: &[f32]) -> Vec<f32> {
    let mut tape = Tape::new();
    let m = tape.constant(maps.clone());
    let w = tape.constant(Tensor::new(vec![1, s.len()], s.to_vec()).unwrap());
    let p = query_prior(&mut tape, ActivationStack { maps: m, refined: true }, ClassWeightVector(w)).unwrap();
    tape.value(p.0).data().to_vec()
}

fn cls_loss(s: &[f32], labels: &[f32]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, s.len()], s.to_vec()).unwrap());
    let l = classification_loss(&mut tape, ClassWeightVector(v), &ClassLabelVector::new(labels.to_vec()).unwrap()).unwrap();
    tape.value(l).item().unwrap() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn prior_is_linear_in_weights(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let n = r.random_range(1..8);
        let maps = random(&[1, n, r.random_range(1..6), r.random_range(1..6)], &mut r);
        let sa: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let sb: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mix: Vec<f32> = sa.iter().zip(&sb).map(|(x, y)| a * x + b * y).collect();
        let lhs = prior_of(&maps, &mix);
        let (pa, pb) = (prior_of(&maps, &sa), prior_of(&maps, &sb));
        for (i, l) in lhs.iter().enumerate() {
            prop_assert!((l - (a * pa[i] + b * pb[i])).abs() <= 1e-5);
        }
    }

    #[test]
    fn prior_is_permutation_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..8);
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let maps = random(&[1, n, h, w], &mut r);
        let s: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let plane = h * w;
        let pmaps = Tensor::from_fn([1, n, h, w], |i| maps.data()[perm[i / plane] * plane + i % plane]);
        let ps: Vec<f32> = perm.iter().map(|&p| s[p]).collect();
        let a = prior_of(&maps, &s);
        let b = prior_of(&pmaps, &ps);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn classification_loss_is_convex(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..12);
        let labels: Vec<f32> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let s1: Vec<f32> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
        let s2: Vec<f32> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
        let mid: Vec<f32> = s1.iter().zip(&s2).map(|(a, b)| (a + b) / 2.0).collect();
        let lhs = cls_loss(&mid, &labels);
        prop_assert!(lhs >= 0.0);
        prop_assert!(lhs <= (cls_loss(&s1, &labels) + cls_loss(&s2, &labels)) / 2.0 + 1e-6);
    }

    #[test]
    fn masking_is_idempotent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (n, h, w) = (r.random_range(1..3), r.random_range(1..7), r.random_range(1..7));
        let img = random(&[n, 3, h, w], &mut r);
        let mask = Tensor::from_fn([n, 1, h, w], |_| r.random_bool(0.5) as u8 as f32);
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let once = mask_support(&mut tape, x, &mask).unwrap();
        let twice = mask_support(&mut tape, once, &mask).unwrap();
        prop_assert_eq!(tape.value(once).data(), tape.value(twice).data());
    }
}

#[test]
fn prior_matches_per_pixel_dot_products() {
    let mut r = rng(17);
    let maps = random(&[1, 3, 2, 2], &mut r);
    let s = [0.3f32, -1.2, 0.7];
    let got = prior_of(&maps, &s);
    for p in 0..4 {
        let expect: f64 = (0..3).map(|c| maps.data()[c * 4 + p] as f64 * s[c] as f64).sum();
        assert!((got[p] as f64 - expect).abs() < 1e-6);
    }
    assert!(prior_of(&maps, &[0.0; 3]).iter().all(|&v| v == 0.0));
}

#[test]
fn mask_extremes() {
    let mut r = rng(3);
    let img = random(&[1, 3, 4, 4], &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let kept = mask_support(&mut tape, x, &Tensor::ones([1, 1, 4, 4])).unwrap();
    let gone = mask_support(&mut tape, x, &Tensor::zeros([1, 1, 4, 4])).unwrap();
    assert_eq!(tape.value(kept).data(), img.data());
    assert!(tape.value(gone).data().iter().all(|&v| v == 0.0));
}

#[test]
fn classification_loss_examples() {
    assert!((cls_loss(&[0.0; 10], &[-1.0; 10]) - std::f64::consts::LN_2).abs() < 1e-6);
    let expected = (1.0 + (-2.0f64).exp()).ln();
    assert!((cls_loss(&[2.0, -2.0], &[1.0, -1.0]) - expected).abs() < 1e-6);
    assert!((expected - 0.1269).abs() < 1e-4);
    assert!(cls_loss(&[60.0, -60.0], &[1.0, -1.0]) < 1e-20);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros([1, 3]));
    assert!(classification_loss(&mut tape, ClassWeightVector(v), &ClassLabelVector::new(vec![1.0; 2]).unwrap()).is_err());
}

#[test]
fn kshot_mean_matches_direct_average() {
    let mut r = rng(8);
    let rows = random(&[5, 10], &mut r);
    let mut tape = Tape::new();
    let v = tape.constant(rows.clone());
    let m = aggregate_kshot(&mut tape, ClassWeightVector(v)).unwrap();
    for c in 0..10 {
        let expect = (0..5).map(|k| rows.data()[k * 10 + c] as f64).sum::<f64>() / 5.0;
        assert!((tape.value(m.0).data()[c] as f64 - expect).abs() < 1e-6);
    }
    let one = tape.constant(Tensor::new(vec![1, 10], rows.data()[..10].to_vec()).unwrap());
    let same = aggregate_kshot(&mut tape, ClassWeightVector(one)).unwrap();
    assert_eq!(tape.value(same.0).data(), &rows.data()[..10]);
}
