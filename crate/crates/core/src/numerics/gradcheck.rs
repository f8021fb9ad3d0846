use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked indices of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `f` at `params` against central
/// differences with step `h`, over every parameter.
///
/// `f` maps a parameter vector to `(value, gradient)`; the gradient is only
/// read at the unperturbed point.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_subset(f, params, h, &all)
}

/// Like [`finite_diff_check`] but only perturbs the listed indices.
pub fn finite_diff_check_subset<F>(
    mut f: F,
    params: &[f64],
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let (f0, analytic) = f(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            index: usize::MAX,
            context: "objective at the base point".into(),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("finite_diff_check gradient", &[params.len()], &[analytic.len()]));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
    };
    for &i in indices {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work)?.0;
        work[i] = orig - h;
        let minus = f(&work)?.0;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: "objective at a perturbed point".into(),
            });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
