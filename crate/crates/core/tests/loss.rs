mod common;

use common::{
    central_difference, focal_iou_reference, focal_reference, random_loss_case, relative_error, rng, sigmoid,
    soft_iou_reference,
};
use mtu_core::loss::{focal_iou_loss, focal_loss, soft_iou, soft_iou_loss, LossConfig};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn frozen_soft_iou_gradient_matches_finite_differences() {
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = random_loss_case(&mut r);
        let p: Vec<f64> = c.logits.iter().map(|&x| sigmoid(x)).collect();
        let out = focal_iou_loss(&p, &c.labels, &c.cfg).unwrap();
        let s = soft_iou_reference(&p, &c.labels, c.cfg.smooth);
        let numeric = central_difference(&c.logits, |x| {
            let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            focal_iou_reference(focal_reference(&p, &c.labels, c.cfg.gamma, c.cfg.epsilon), s)
        });
        worst = worst.max(relative_error(&out.grad, &numeric));
    }
    assert!(worst < 1e-6, "worst relative error {worst:.3e}");
}

#[test]
fn full_gradient_matches_finite_differences() {
    let mut r = rng(101);
    for _ in 0..200 {
        let mut c = random_loss_case(&mut r);
        c.cfg.differentiate_iou = true;
        let p: Vec<f64> = c.logits.iter().map(|&x| sigmoid(x)).collect();
        let out = focal_iou_loss(&p, &c.labels, &c.cfg).unwrap();
        let numeric = central_difference(&c.logits, |x| {
            let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            let s = soft_iou_reference(&p, &c.labels, c.cfg.smooth);
            focal_iou_reference(focal_reference(&p, &c.labels, c.cfg.gamma, c.cfg.epsilon), s)
        });
        let err = relative_error(&out.grad, &numeric);
        assert!(err < 1e-6, "{err:.3e}");
    }
}

#[test]
fn focal_and_soft_iou_gradients_match_finite_differences() {
    let mut r = rng(102);
    for _ in 0..200 {
        let c = random_loss_case(&mut r);
        let p: Vec<f64> = c.logits.iter().map(|&x| sigmoid(x)).collect();
        let focal = focal_loss(&p, &c.labels, &c.cfg).unwrap();
        let numeric = central_difference(&c.logits, |x| {
            let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            focal_reference(&p, &c.labels, c.cfg.gamma, c.cfg.epsilon)
        });
        assert!(relative_error(&focal.grad, &numeric) < 1e-6);

        let iou = soft_iou_loss(&p, &c.labels, &c.cfg).unwrap();
        let numeric = central_difference(&c.logits, |x| {
            let p: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            1.0 - soft_iou_reference(&p, &c.labels, c.cfg.smooth)
        });
        assert!(relative_error(&iou.grad, &numeric) < 1e-6);
    }
}

#[test]
fn random_8x8_value_matches_reference() {
    let mut r = rng(103);
    let p: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<bool> = (0..64).map(|_| r.random_bool(0.2)).collect();
    let cfg = LossConfig::default();
    let out = focal_iou_loss(&p, &y, &cfg).unwrap();
    let s = soft_iou_reference(&p, &y, 1.0);
    let expected = focal_iou_reference(focal_reference(&p, &y, 2.0, 1e-7), s);
    assert!((out.value - expected).abs() < 1e-12);
    assert!((out.soft_iou - s).abs() < 1e-15);
}

#[test]
fn soft_iou_grows_with_foreground_probability() {
    let cfg = LossConfig::default();
    let y = [true, false, true, false];
    let mut last = 0.0;
    for i in 0..=100 {
        let v = i as f64 / 100.0;
        let s = soft_iou(&[v, 0.3, 0.6, 0.1], &y, &cfg).unwrap();
        assert!(s >= last);
        last = s;
    }
}

#[test]
fn zero_exactly_at_perfect_overlap_or_zero_focal() {
    let cfg = LossConfig::default();
    let y = [true, false, false, true];
    let perfect = focal_iou_loss(&[1.0, 0.0, 0.0, 1.0], &y, &cfg).unwrap();
    assert_eq!(perfect.soft_iou, 1.0);
    assert_eq!(perfect.value, 0.0);

    // γ = 0 with every prediction inside the clamp is strictly positive.
    let cfg0 = LossConfig {
        gamma: 0.0,
        ..cfg
    };
    let out = focal_iou_loss(&[0.9, 0.1, 0.2, 0.7], &y, &cfg0).unwrap();
    assert!(out.value > 0.0 && out.soft_iou < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn focal_iou_is_non_negative_and_zero_only_when_expected(
        p in prop::collection::vec(0.0f64..=1.0, 1..32),
        seed in any::<u64>(),
        gamma in 0.0f64..4.0,
        smooth in 0.05f64..3.0,
    ) {
        let mut r = rng(seed);
        let y: Vec<bool> = p.iter().map(|_| r.random_bool(0.4)).collect();
        let cfg = LossConfig { gamma, smooth, ..LossConfig::default() };
        let out = focal_iou_loss(&p, &y, &cfg).unwrap();
        prop_assert!(out.value >= 0.0);
        prop_assert!(out.soft_iou > 0.0 && out.soft_iou <= 1.0);
        prop_assert_eq!(out.grad.len(), p.len());
        let fl = focal_loss(&p, &y, &cfg).unwrap().value;
        if out.value == 0.0 {
            prop_assert!(out.soft_iou == 1.0 || fl == 0.0);
        }
        if out.soft_iou < 1.0 && fl > 0.0 {
            prop_assert!(out.value > 0.0);
        }
    }

    #[test]
    fn soft_iou_is_one_only_for_exact_binary_match(
        bits in prop::collection::vec(any::<bool>(), 1..32),
        flip in any::<prop::sample::Index>(),
        smooth in 0.05f64..3.0,
    ) {
        let cfg = LossConfig { smooth, ..LossConfig::default() };
        let p: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(soft_iou(&p, &bits, &cfg).unwrap(), 1.0);
        let mut off = p.clone();
        let i = flip.index(p.len());
        off[i] = 1.0 - off[i];
        prop_assert!(soft_iou(&off, &bits, &cfg).unwrap() < 1.0);
    }
}
