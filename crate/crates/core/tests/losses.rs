use proptest::prelude::*;
use tamperlens_core::losses::*;
use tamperlens_core::stub::{TokenId, TokenSequence};
use tamperlens_core::tensor::gradcheck::check_gradients;
use tamperlens_core::tensor::{Tape, Tensor, Var};

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence(ids.iter().map(|&i| TokenId(i)).collect())
}

fn scalar(t: &Tape<f64>, v: Var) -> f64 {
    t.value(v)[0]
}

#[test]
fn text_loss_closed_forms() {
    let mut t = Tape::<f64>::new();
    let mut l = vec![0.0; 3 * 7];
    for (i, k) in [2, 0, 6].iter().enumerate() {
        l[i * 7 + k] = 40.0;
    }
    let x = t.constant(&[3, 7], l).unwrap();
    let v = text_loss(&mut t, x, &seq(&[2, 0, 6])).unwrap();
    assert!(scalar(&t, v) < 1e-3);

    let u = t.constant(&[3, 7], vec![0.25; 21]).unwrap();
    let v = text_loss(&mut t, u, &seq(&[1, 4, 5])).unwrap();
    assert!((scalar(&t, v) - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn text_loss_hand_case() {
    // Slot 0: logits [1, 2, 3], target 2. Slot 1: logits [0, 0, ln 2], target 0.
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 2f64.ln()]).unwrap();
    let v = text_loss(&mut t, x, &seq(&[2, 0])).unwrap();
    let s0 = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let want = ((s0.ln() - 3.0) + 4f64.ln()) / 2.0;
    assert!((scalar(&t, v) - want).abs() < 1e-12);
}

#[test]
fn text_loss_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(text_loss(&mut t, x, &seq(&[0])).is_err());
    assert!(text_loss(&mut t, x, &seq(&[0, 3])).is_err());
}

#[test]
fn mask_loss_closed_forms() {
    let mut t = Tape::<f64>::new();
    let g = t.constant(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let zero = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let b = bce_loss(&mut t, zero, g).unwrap();
    assert!((scalar(&t, b) - 2f64.ln()).abs() < 1e-12);

    let sat = t.constant(&[2, 2], vec![30.0, 30.0, -30.0, -30.0]).unwrap();
    let b = bce_loss(&mut t, sat, g).unwrap();
    let d = dice_loss(&mut t, sat, g).unwrap();
    assert!(scalar(&t, b) < 1e-3 && scalar(&t, d) < 1e-3);

    let p = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let d = dice_from_probs(&mut t, p, g).unwrap();
    assert_eq!(scalar(&t, d), 0.25);

    // Empty prediction on an empty mask costs nothing.
    let e = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let d = dice_from_probs(&mut t, e, e).unwrap();
    assert_eq!(scalar(&t, d), 0.0);

    let bad = t.constant(&[4], vec![0.0; 4]).unwrap();
    assert!(mask_loss(&mut t, bad, g, &LossWeights::default()).is_err());
}

#[test]
fn total_loss_weights() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(&[1], vec![0.5]).unwrap();
    let b = t.constant(&[1], vec![0.3]).unwrap();
    let v = total_loss(&mut t, a, b, &LossWeights::default()).unwrap();
    assert!((scalar(&t, v) - 0.8).abs() < 1e-15);

    let text = t.leaf(&Tensor::new(&[1], vec![0.5]).unwrap().with_grad());
    let mask = t.leaf(&Tensor::new(&[1], vec![0.3]).unwrap().with_grad());
    let w = LossWeights {
        lambda_txt: 0.0,
        ..LossWeights::default()
    };
    let v = total_loss(&mut t, text, mask, &w).unwrap();
    assert_eq!(scalar(&t, v), 0.3);
    t.backward(v).unwrap();
    assert_eq!(t.grad(text).unwrap(), &[0.0]);
    assert_eq!(t.grad(mask).unwrap(), &[1.0]);
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let w = LossWeights {
        lambda_dice: -0.1,
        ..LossWeights::default()
    };
    assert!(w.validate().is_err());
}

#[test]
fn mask_loss_gradient_matches_finite_differences() {
    let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.9).sin() * 2.0).collect())
        .unwrap()
        .with_grad();
    let gt = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect()).unwrap();
    let r = check_gradients(&[x, gt], |t, v| mask_loss(t, v[0], v[1], &LossWeights::default())).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
    let logits = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap().with_grad();
    let r = check_gradients(&[logits], |t, v| text_loss(t, v[0], &seq(&[2, 1]))).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

proptest! {
    #[test]
    fn mask_loss_is_nonnegative_and_scales(
        logits in prop::collection::vec(-8.0f64..8.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
        c in 0.01f64..10.0,
    ) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(&[4, 4], logits).unwrap();
        let g = t.constant(&[4, 4], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let w = LossWeights::default();
        let base = mask_loss(&mut t, x, g, &w).unwrap();
        let d = dice_loss(&mut t, x, g).unwrap();
        let scaled_w = LossWeights { lambda_bce: c * w.lambda_bce, lambda_dice: c * w.lambda_dice, ..w };
        let scaled = mask_loss(&mut t, x, g, &scaled_w).unwrap();
        let (b, d, s) = (t.value(base)[0], t.value(d)[0], t.value(scaled)[0]);
        prop_assert!(b >= 0.0);
        prop_assert!((0.0..1.0).contains(&d));
        prop_assert!((s - c * b).abs() <= 1e-12 * (1.0 + s.abs()));
    }
}
