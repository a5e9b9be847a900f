//! Central finite-difference verification of tape gradients.

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a relu kink.
    pub excluded_kinks: usize,
    /// A forward evaluation produced a non-finite loss.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &mut F) -> Result<(f64, Vec<bool>)>
where
    F: FnMut(&mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    tape.set_check_finite(false);
    let loss = f(&mut tape)?;
    Ok((tape.value(loss).item(), tape.relu_signature()))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε` for every parameter coordinate.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(AutodiffError::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded_kinks: 0,
        non_finite: false,
    };

    let (grads, base_sig) = {
        let mut tape = Tape::new(&*store);
        tape.set_check_finite(false);
        let loss = f(&mut tape)?;
        if !tape.value(loss).item().is_finite() {
            report.non_finite = true;
            return Ok(report);
        }
        let sig = tape.relu_signature();
        (tape.backward(loss)?, sig)
    };

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        for j in 0..n {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[j]);
            let orig = store.value(id).data()[j];

            store.value_mut(id).data_mut()[j] = orig + eps;
            let (plus, sig_p) = evaluate(store, &mut f)?;
            store.value_mut(id).data_mut()[j] = orig - eps;
            let (minus, sig_m) = evaluate(store, &mut f)?;
            store.value_mut(id).data_mut()[j] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite = true;
                continue;
            }
            if sig_p != base_sig || sig_m != base_sig {
                report.excluded_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
