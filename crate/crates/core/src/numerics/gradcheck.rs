//! Central finite-difference gradient checking.

use super::{Fault, ParamStore, Tape, Var};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that vanishing gradients are compared absolutely.
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_error.is_finite()
    }
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every coordinate of every parameter in `store`. Parameters are
/// restored exactly afterwards. Failures are collected, never short-circuited.
pub fn grad_check<F>(
    name: impl Into<String>,
    store: &mut ParamStore<f64>,
    f: F,
    tolerance: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        if let Some(fault) = fault {
            tape.inject_fault(fault);
        }
        let loss = f(&mut tape)?;
        tape.backward(loss).into_params()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        Ok(tape.item(loss))
    };

    let mut report = GradCheckReport {
        name: name.into(),
        coords_checked: 0,
        max_rel_error: 0.0,
        tolerance,
        failures: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for j in 0..n {
            let original = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = original + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = original - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let scale = analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
            let rel_error = (analytic - numeric).abs() / scale;
            report.coords_checked += 1;
            if rel_error.is_nan() || rel_error > report.max_rel_error {
                report.max_rel_error = rel_error;
            }
            if rel_error.is_nan() || rel_error > tolerance {
                report.failures.push(CoordFailure {
                    param: store.name(id).to_string(),
                    index: j,
                    analytic,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(report)
}
