//! Central finite-difference gradient checker.
//!
//! The checker only ever calls the forward closure, so it stays independent
//! of the backward rules it validates. Relative error per element is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the floor
//! keeps gradients that are zero analytically from dividing roundoff by
//! zero.

use super::{Result, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the taped gradient of `f` against central differences for
/// every element of every input with `requires_grad` set.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, f, DEFAULT_STEP, DEFAULT_FLOOR)
}

pub fn check_gradients_with<F>(inputs: &[Tensor<f64>], f: F, step: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let zeros = vec![0.0; t.len()];
        let analytic = tape.grad(vars[ti]).unwrap_or(&zeros).to_vec();
        for e in 0..t.len() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst = (ti, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
