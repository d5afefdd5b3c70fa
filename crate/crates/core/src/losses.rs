//! Training objective: token cross-entropy plus a BCE/DICE mask loss.

use crate::stub::TokenSequence;
use crate::tensor::{Real, Result, Tape, TensorError, Var};

/// DICE smoothing term.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_txt: f64,
    pub lambda_mask: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_txt: 1.0,
            lambda_mask: 1.0,
            lambda_bce: 1.0,
            lambda_dice: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_txt", self.lambda_txt),
            ("lambda_mask", self.lambda_mask),
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TensorError::InvalidArgument {
                    op: "loss_weights",
                    reason: format!("{name} = {v} must be finite and non-negative"),
                });
            }
        }
        Ok(())
    }
}

/// Mean over slots of `−log softmax(logits)[target]`; `logits` is
/// `[len, vocab]`.
pub fn text_loss<T: Real>(t: &mut Tape<T>, logits: Var, target: &TokenSequence) -> Result<Var> {
    let s = t.shape(logits).to_vec();
    let [len, vocab] = s[..] else {
        return Err(TensorError::InvalidArgument {
            op: "text_loss",
            reason: format!("expected [len, vocab] logits, got {s:?}"),
        });
    };
    if target.len() != len {
        return Err(TensorError::ShapeMismatch {
            op: "text_loss",
            lhs: s,
            rhs: vec![target.len()],
        });
    }
    let mut onehot = vec![T::zero(); len * vocab];
    for (i, id) in target.0.iter().enumerate() {
        if id.index() >= vocab {
            return Err(TensorError::InvalidArgument {
                op: "text_loss",
                reason: format!("target id {} outside vocabulary of {vocab}", id.0),
            });
        }
        onehot[i * vocab + id.index()] = T::one();
    }
    let onehot = t.constant(&[len, vocab], onehot)?;
    let lp = t.log_softmax(logits, 1)?;
    let picked = t.mul(lp, onehot)?;
    let total = t.sum_all(picked);
    Ok(t.mul_scalar(total, T::of(-1.0 / len as f64)))
}

/// Mean pixelwise `softplus(x) − x·g`.
pub fn bce_loss<T: Real>(t: &mut Tape<T>, logits: Var, gt: Var) -> Result<Var> {
    check_same(t, logits, gt, "bce_loss")?;
    let sp = t.softplus(logits);
    let xg = t.mul(logits, gt)?;
    let d = t.sub(sp, xg)?;
    Ok(t.mean_all(d))
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` with `p = sigmoid(logits)`.
pub fn dice_loss<T: Real>(t: &mut Tape<T>, logits: Var, gt: Var) -> Result<Var> {
    check_same(t, logits, gt, "dice_loss")?;
    let p = t.sigmoid(logits);
    dice_from_probs(t, p, gt)
}

/// Dice loss on probabilities already in [0, 1].
pub fn dice_from_probs<T: Real>(t: &mut Tape<T>, p: Var, gt: Var) -> Result<Var> {
    let eps = T::of(DICE_EPS);
    let pg = t.mul(p, gt)?;
    let inter = t.sum_all(pg);
    let num = t.mul_scalar(inter, T::of(2.0));
    let num = t.add_scalar(num, eps);
    let sp = t.sum_all(p);
    let sg = t.sum_all(gt);
    let den = t.add(sp, sg)?;
    let den = t.add_scalar(den, eps);
    let ratio = t.div(num, den)?;
    let neg = t.neg(ratio);
    Ok(t.add_scalar(neg, T::one()))
}

/// `λ_bce·BCE + λ_dice·DICE` for one image.
pub fn mask_loss<T: Real>(t: &mut Tape<T>, logits: Var, gt: Var, w: &LossWeights) -> Result<Var> {
    let bce = bce_loss(t, logits, gt)?;
    let dice = dice_loss(t, logits, gt)?;
    let a = t.mul_scalar(bce, T::of(w.lambda_bce));
    let b = t.mul_scalar(dice, T::of(w.lambda_dice));
    t.add(a, b)
}

/// `λ_txt·text + λ_mask·mask`.
pub fn total_loss<T: Real>(t: &mut Tape<T>, text: Var, mask: Var, w: &LossWeights) -> Result<Var> {
    let a = t.mul_scalar(text, T::of(w.lambda_txt));
    let b = t.mul_scalar(mask, T::of(w.lambda_mask));
    t.add(a, b)
}

fn check_same<T: Real>(t: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape(a).to_vec(),
            rhs: t.shape(b).to_vec(),
        });
    }
    Ok(())
}
