//! Brute-force metric oracles: plain pixel counting and the all-pairs
//! definition of AUC.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tamperlens_core::eval::{f1_at, f1_curve, f1_optimal, pixel_auc, THRESHOLDS};
use tamperlens_core::tensor::Tensor;

pub fn oracle_f1(pred: &[f32], gt: &[f32], th: f64) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let yes = f64::from(p) >= th;
        let pos = g > 0.5;
        if yes && pos {
            tp += 1.0;
        }
        if yes && !pos {
            fp += 1.0;
        }
        if !yes && pos {
            fn_ += 1.0;
        }
    }
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

pub fn oracle_auc(pred: &[f32], gt: &[f32]) -> Option<f64> {
    let pos: Vec<f32> = pred.iter().zip(gt).filter(|(_, &g)| g > 0.5).map(|(&p, _)| p).collect();
    let neg: Vec<f32> = pred.iter().zip(gt).filter(|(_, &g)| g <= 0.5).map(|(&p, _)| p).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// 200 random 16×16 pairs, with predictions quantised so ties occur.
pub fn random_pairs() -> Vec<(Vec<f32>, Vec<f32>)> {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(2024);
    (0..200)
        .map(|i| {
            let density = r.gen_range(0.0..0.6);
            let gt: Vec<f32> = (0..256).map(|_| if r.gen_bool(density) { 1.0 } else { 0.0 }).collect();
            let levels = if i % 2 == 0 { 7 } else { 1000 };
            let pred = gt
                .iter()
                .map(|&g| {
                    let v: f32 = 0.35 * g + r.gen_range(0.0..0.65f32);
                    (v * levels as f32).round() / levels as f32
                })
                .collect();
            (pred, gt)
        })
        .collect()
}

fn t(v: &[f32]) -> Tensor<f32> {
    Tensor::new(&[16, 16], v.to_vec()).unwrap()
}

/// F1 exact, AUC within 1e-12, optimal F1 equal to the best grid threshold
/// and within one grid step of an exhaustive search.
pub fn check_against_oracles() -> Result<(), String> {
    let step = 1.0 / THRESHOLDS as f64;
    for (k, (pred, gt)) in random_pairs().iter().enumerate() {
        let (p, g) = (t(pred), t(gt));
        for th in [0.0, 0.25, 0.5, 0.73, 1.0] {
            let (a, b) = (f1_at(&p, &g, th).map_err(|e| e.to_string())?, oracle_f1(pred, gt, th));
            if a != b {
                return Err(format!("pair {k}, threshold {th}: F1 {a} vs oracle {b}"));
            }
        }
        match (pixel_auc(&p, &g).map_err(|e| e.to_string())?, oracle_auc(pred, gt)) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            other => return Err(format!("pair {k}: AUC {other:?}")),
        }
        let curve = f1_curve(&p, &g).map_err(|e| e.to_string())?;
        for (i, c) in curve.iter().enumerate() {
            let want = oracle_f1(pred, gt, i as f64 * step);
            if *c != want {
                return Err(format!("pair {k}, grid point {i}: {c} vs oracle {want}"));
            }
        }
        let grid_best = (0..THRESHOLDS).map(|i| oracle_f1(pred, gt, i as f64 * step)).fold(f64::NEG_INFINITY, f64::max);
        let opt = f1_optimal(&p, &g).map_err(|e| e.to_string())?;
        if opt != grid_best {
            return Err(format!("pair {k}: optimal F1 {opt} vs grid oracle {grid_best}"));
        }
        // every distinct value as a threshold, then each value snapped down
        // to the grid: the grid search must reach the snapped optimum
        let exhaustive = pred.iter().map(|&v| oracle_f1(pred, gt, f64::from(v))).fold(0.0, f64::max);
        let snapped: Vec<f32> = pred.iter().map(|&v| ((f64::from(v) / step).floor() * step) as f32).collect();
        let snapped_best = snapped.iter().map(|&v| oracle_f1(pred, gt, f64::from(v))).fold(0.0, f64::max);
        if opt > exhaustive + 1e-12 || opt + 1e-12 < snapped_best {
            return Err(format!("pair {k}: optimal F1 {opt} outside [{snapped_best}, {exhaustive}]"));
        }
    }
    Ok(())
}
