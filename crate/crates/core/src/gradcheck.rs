//! Central finite-difference verification of tape gradients.
//!
//! The numerical side never touches the tape's backward rules: each
//! perturbed evaluation rebuilds the computation on a fresh tape and reads
//! only the forward value.

use crate::tensor::{Matrix, Tape, TensorError, Var};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1)` seen.
    pub max_rel_err: f64,
    /// `(input index, flat entry index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Relative error with a unit floor on the denominator, so that entries
/// whose true gradient is near zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the tape gradient of a scalar function of `inputs` against
/// central differences with step `h`. Each input is recorded as a leaf in
/// the order given.
pub fn check_gradients<E, F>(inputs: &[Matrix], h: f64, f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[Matrix]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out)?)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Matrix> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let original = work[k].data()[e];
            work[k].data_mut()[e] = original + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = original - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[e], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, e);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
