//! Central finite-difference checks of analytic gradients.

use crate::params::{ParamId, ParamStore};

pub const STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose true gradient
/// is essentially zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst entry found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare `grads` against central differences of `loss`, probing up to
/// `per_tensor` evenly spaced entries of every tensor in `params`.
pub fn check(
    params: &mut ParamStore<f64>,
    grads: &ParamStore<f64>,
    per_tensor: usize,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradReport {
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for pid in ids {
        let n = params.get(pid).len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = params.get(pid).data()[e];
            params.get_mut(pid).data_mut()[e] = orig + STEP;
            let up = loss(params);
            params.get_mut(pid).data_mut()[e] = orig - STEP;
            let down = loss(params);
            params.get_mut(pid).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(pid).data()[e];
            let rel = relative_error(numeric, analytic);
            report.entries_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradReport {
                    max_rel_error: rel,
                    worst_param: params.name(pid).to_string(),
                    worst_index: e,
                    analytic,
                    numeric,
                    entries_checked: report.entries_checked,
                };
            }
        }
    }
    report
}
