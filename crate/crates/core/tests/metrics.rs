mod common;

use common::oracles;
use proptest::prelude::*;
use tamperlens_core::eval::{f1_at, f1_optimal, pixel_auc, EvalError};
use tamperlens_core::tensor::Tensor;

fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn f1_and_auc_match_brute_force_oracles() {
    oracles::check_against_oracles().unwrap();
}

#[test]
fn hand_cases() {
    let p = t(&[2, 2], &[0.9, 0.2, 0.6, 0.1]);
    let g = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
    assert!((f1_at(&p, &g, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);

    let p = t(&[4], &[0.1, 0.4, 0.35, 0.8]);
    let g = t(&[4], &[0.0, 0.0, 1.0, 1.0]);
    assert_eq!(pixel_auc(&p, &g).unwrap(), Some(0.75));
}

#[test]
fn trivial_cases() {
    let g = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let inv = t(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    for th in [0.01, 0.5, 1.0] {
        assert_eq!(f1_at(&g, &g, th).unwrap(), 1.0);
        assert_eq!(f1_at(&inv, &g, th).unwrap(), 0.0);
    }
    assert_eq!(pixel_auc(&g, &g).unwrap(), Some(1.0));
    assert_eq!(pixel_auc(&inv, &g).unwrap(), Some(0.0));
    let flat = t(&[2, 3], &[0.3; 6]);
    assert_eq!(pixel_auc(&flat, &g).unwrap(), Some(0.5));
    let sep = t(&[2, 3], &[0.9, 0.2, 0.7, 0.1, 0.3, 0.61]);
    assert_eq!(f1_optimal(&sep, &g).unwrap(), 1.0);
}

#[test]
fn empty_ground_truth_conventions() {
    let empty = t(&[2, 2], &[0.0; 4]);
    let low = t(&[2, 2], &[0.1; 4]);
    let high = t(&[2, 2], &[0.1, 0.9, 0.1, 0.1]);
    assert_eq!(f1_at(&low, &empty, 0.5).unwrap(), 1.0);
    assert_eq!(f1_at(&high, &empty, 0.5).unwrap(), 0.0);
    assert_eq!(pixel_auc(&low, &empty).unwrap(), None);
    let full = t(&[2, 2], &[1.0; 4]);
    assert_eq!(pixel_auc(&low, &full).unwrap(), None);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = t(&[2, 2], &[0.0; 4]);
    let b = t(&[4], &[0.0; 4]);
    assert!(matches!(f1_at(&a, &b, 0.5), Err(EvalError::ShapeMismatch { .. })));
    assert!(f1_optimal(&a, &b).is_err());
    assert!(pixel_auc(&a, &b).is_err());
}

fn pair_strategy() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (4usize..80).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.0f32..=1.0, n),
            proptest::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32)], n),
        )
    })
}

proptest! {
    #[test]
    fn optimal_dominates_fixed((pred, gt) in pair_strategy()) {
        let n = pred.len();
        let (p, g) = (t(&[n], &pred), t(&[n], &gt));
        prop_assert!(f1_optimal(&p, &g).unwrap() >= f1_at(&p, &g, 0.5).unwrap());
    }

    #[test]
    fn auc_is_invariant_under_cubing((pred, gt) in pair_strategy()) {
        let n = pred.len();
        let cubed: Vec<f32> = pred.iter().map(|&v| v * v * v).collect();
        // cubing in f32 can merge nearly equal values; skip those draws
        let distinct_before = {
            let mut v = pred.clone();
            v.sort_by(f32::total_cmp);
            v.dedup();
            v.len()
        };
        let distinct_after = {
            let mut v = cubed.clone();
            v.sort_by(f32::total_cmp);
            v.dedup();
            v.len()
        };
        prop_assume!(distinct_before == distinct_after);
        let a = pixel_auc(&t(&[n], &pred), &t(&[n], &gt)).unwrap();
        let b = pixel_auc(&t(&[n], &cubed), &t(&[n], &gt)).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn scores_lie_in_unit_interval((pred, gt) in pair_strategy(), th in 0.0f64..=1.0) {
        let n = pred.len();
        let (p, g) = (t(&[n], &pred), t(&[n], &gt));
        let f = f1_at(&p, &g, th).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        if let Some(a) = pixel_auc(&p, &g).unwrap() {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
