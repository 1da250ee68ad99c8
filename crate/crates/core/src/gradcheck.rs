//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever reads `loss.item()` from freshly built tapes,
//! so it shares no code with the reverse sweep it is checking.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative error. Gradient entries whose magnitude is
/// below this are compared on an absolute scale of `REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the tape gradient of `f` at `inputs` with central differences of
/// step `h`. Every input is treated as a parameter.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v)).collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let x0 = input.data()[idx];
            work[k].data_mut()[idx] = x0 + h;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = x0 - h;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[idx];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((k, idx));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
