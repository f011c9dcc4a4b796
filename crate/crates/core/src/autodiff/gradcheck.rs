//! Central-difference verification of reverse-mode gradients.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors, so that entries whose true
/// gradient is zero are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose perturbation crossed a kink (relu, max, matching).
    pub skipped: usize,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_signature()))
}

fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<(Vec<Tensor>, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let g = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((g, tape.branch_signature()))
}

fn failed(tolerance: f64, e: impl ToString) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance,
        error: Some(e.to_string()),
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences for every entry of every input.
///
/// `f` records the function on a fresh tape given one variable per input.
/// Entries whose `+step`/`-step` evaluations fall in a different smooth
/// piece than the base point are skipped and counted.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (grads, base_sig) = match analytic(&f, inputs) {
        Ok(r) => r,
        Err(e) => return failed(tolerance, e),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance,
        error: None,
    };
    let mut work = inputs.to_vec();
    for (ti, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + step;
            let plus = evaluate(&f, &work);
            work[ti].data_mut()[k] = orig - step;
            let minus = evaluate(&f, &work);
            work[ti].data_mut()[k] = orig;
            let ((fp, sp), (fm, sm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return failed(tolerance, e),
            };
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(g.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, k));
            }
        }
    }
    report
}

/// Directional variant for inputs too large to check entry by entry:
/// compares `grad . d` with the central difference along random unit
/// directions `d`.
pub fn grad_check_directional<F, R>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
    directions: usize,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng,
{
    let (grads, base_sig) = match analytic(&f, inputs) {
        Ok(r) => r,
        Err(e) => return failed(tolerance, e),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance,
        error: None,
    };
    for d in 0..directions {
        let dir: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let norm = dir.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dir)
                .map(|(t, dv)| {
                    let mut s = t.clone();
                    for (x, v) in s.data_mut().iter_mut().zip(dv) {
                        *x += sign * step * v / norm;
                    }
                    s
                })
                .collect()
        };
        let (plus, minus) = (evaluate(&f, &shifted(1.0)), evaluate(&f, &shifted(-1.0)));
        let ((fp, sp), (fm, sm)) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => return failed(tolerance, e),
        };
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let projected: f64 = grads
            .iter()
            .zip(&dir)
            .flat_map(|(g, dv)| g.data().iter().zip(dv).map(|(a, b)| a * b / norm))
            .sum();
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(projected, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((0, d));
        }
    }
    report
}
