//! Central-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and numeric derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks every coordinate of `x` and returns the largest relative error.
///
/// `f` must build a scalar from its argument on the given tape.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    Ok(gradcheck_at(f, x, step, &all)?.max_rel_error)
}

/// Like [`gradcheck`] but only probes the listed coordinates.
pub fn gradcheck_at<F>(f: F, x: &Tensor, step: f64, indices: &[usize]) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in indices {
        if i >= x.numel() {
            return Err(Error::contract(format!(
                "gradcheck index {} outside tensor of {} elements",
                i,
                x.numel()
            )));
        }
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = original - step;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient of `f` at `x` from one reverse sweep.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    Ok(tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    tape.value(out).item()
}
