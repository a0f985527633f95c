//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

/// Worst element found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares tape gradients of `f` with central differences at every parameter element.
///
/// `f` records a scalar function of the store on the tape it is given. The
/// relative error per element is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(params: &mut ParamStore, step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Param(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let value = tape.value(out).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} at base point")));
    }
    let grads = tape.backward(out)?;
    let mut analytic = params.clone();
    analytic.zero_grad();
    grads.accumulate_into(&mut analytic)?;
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let out = f(&mut tape, store)?;
        let v = tape.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("function value {v} under perturbation")))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        for i in 0..len {
            let original = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = original + step;
            let plus = eval(params);
            params.get_mut(&name)?.data_mut()[i] = original - step;
            let minus = eval(params);
            params.get_mut(&name)?.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic.grad(&name)?.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || report.param.is_empty() {
                report = GradCheckReport {
                    max_rel_error: rel,
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
