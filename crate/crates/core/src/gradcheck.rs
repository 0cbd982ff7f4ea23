//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used by the gradient audits.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors; gradients smaller than this are
/// effectively compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of `build` against central differences for
/// every element of every input. `build` receives one variable per input and
/// must return a scalar; it may add frozen constants of its own.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            tape.grad(v)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("input {i} is not connected to the loss")))
        })
        .collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
