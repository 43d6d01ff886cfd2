use serde::Serialize;

use super::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Comparison of analytic and central-difference gradients for one parameter.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Denominator floor for [`relative_error`]. Below it, central differences
/// are dominated by rounding in the loss rather than by the gradient.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is (near) zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the tape gradient of the scalar `f` against central differences
/// for every element of the listed parameters. Values in `store` are
/// restored before returning.
pub fn grad_check<F>(store: &mut ParamStore<f64>, ids: &[ParamId], f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    check_finite(tape.value(loss).item(), "loss")?;
    tape.backward(loss)?;
    let analytic = tape.param_grads();

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let l = f(store, &mut t)?;
        let v = t.value(l).item();
        check_finite(v, "perturbed loss")?;
        Ok(v)
    };

    let mut entries = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).len();
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for e in 0..n {
            let orig = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig - step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[e]);
            check_finite(a, "analytic gradient")?;
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        entries.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            elements: n,
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            passed: max_rel <= tol,
        });
    }
    Ok(GradCheckReport { step, tolerance: tol, entries })
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}
