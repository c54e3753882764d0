use serde::Serialize;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central-difference check of `analytic` against `loss` at `params`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`; the worst
/// entry is reported.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || !rel.is_finite() {
            report = GradCheckReport {
                max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report
}
