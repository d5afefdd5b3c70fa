//! Pixel-level localisation scores for one image.

use super::{EvalError, Result};
use crate::tensor::Tensor;

/// Number of evenly spaced thresholds in `[0, 1)` searched by
/// [`f1_optimal`].
pub const THRESHOLDS: usize = 256;

pub const FIXED_THRESHOLD: f64 = 0.5;

fn check(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(EvalError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    Ok(())
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        // empty ground truth, nothing predicted
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// F1 of `pred >= threshold` against `gt > 0.5`. Both empty scores 1;
/// empty ground truth with any predicted pixel scores 0.
pub fn f1_at(pred: &Tensor<f32>, gt: &Tensor<f32>, threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p as f64 >= threshold, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// F1 at every threshold `k / 256`, `k = 0..256`.
pub fn f1_curve(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<[f64; THRESHOLDS]> {
    check(pred, gt)?;
    // p >= k/256  <=>  floor(256 p) >= k, exactly, since scaling by 256 is exact.
    let mut pos = [0usize; THRESHOLDS];
    let mut neg = [0usize; THRESHOLDS];
    let mut total_pos = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let scaled = (p as f64 * THRESHOLDS as f64).floor();
        let is_pos = g > 0.5;
        total_pos += is_pos as usize;
        if scaled < 0.0 || scaled.is_nan() {
            // below every threshold
            continue;
        }
        let bin = (scaled as usize).min(THRESHOLDS - 1);
        if is_pos {
            pos[bin] += 1;
        } else {
            neg[bin] += 1;
        }
    }
    // Sweep from the highest threshold down, accumulating predicted pixels.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = [0f64; THRESHOLDS];
    for k in (0..THRESHOLDS).rev() {
        tp += pos[k];
        fp += neg[k];
        curve[k] = f1_from_counts(tp, fp, total_pos - tp);
    }
    Ok(curve)
}

/// Best F1 over the thresholds `k / 256`, `k = 0..256`.
pub fn f1_optimal(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    Ok(f1_curve(pred, gt)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Mann–Whitney AUC with midranks for ties. `None` when the ground truth
/// has no positive or no negative pixel.
pub fn pixel_auc(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Option<f64>> {
    check(pred, gt)?;
    let mut items: Vec<(f32, bool)> = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p, g > 0.5)).collect();
    let n_pos = items.iter().filter(|x| x.1).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0f64;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].0 == items[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * items[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)))
}
