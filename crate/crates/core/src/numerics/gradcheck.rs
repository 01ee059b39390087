//! Central finite-difference validation of analytic gradients.

use super::{Gradients, ParamId, ParamSet};

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Relative error used for every gradient comparison in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` with step `eps`,
/// entry by entry over every parameter. `params` is not modified.
///
/// A non-finite loss evaluation is reported as an infinite error.
pub fn finite_diff_check(
    params: &ParamSet,
    analytic: &Gradients,
    eps: f64,
    loss: impl FnMut(&ParamSet) -> f64,
) -> GradCheckReport {
    let ids: Vec<ParamId> = params.ids().collect();
    finite_diff_check_subset(params, analytic, &ids, eps, loss)
}

/// Same as [`finite_diff_check`] restricted to the listed parameters.
pub fn finite_diff_check_subset(
    params: &ParamSet,
    analytic: &Gradients,
    ids: &[ParamId],
    eps: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> GradCheckReport {
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for &id in ids {
        for k in 0..params.get(id).len() {
            let original = params.get(id).as_slice()[k];
            probe.get_mut(id).as_mut_slice()[k] = original + eps;
            let plus = loss(&probe);
            probe.get_mut(id).as_mut_slice()[k] = original - eps;
            let minus = loss(&probe);
            probe.get_mut(id).as_mut_slice()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).as_slice()[k];
            let err = if numeric.is_finite() && a.is_finite() {
                relative_error(a, numeric)
            } else {
                f64::INFINITY
            };
            report.entries_checked += 1;
            if err > report.max_rel_error || (report.worst.is_none() && err.is_infinite()) {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    report
}
