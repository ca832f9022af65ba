use super::{NnError, ParamSet, Tape, Var};

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter path and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    /// Largest `|a - n|` over all coordinates.
    pub max_abs_error: f64,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport, NnError>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var, NnError>,
{
    grad_check_strided(f, params, eps, 1)
}

/// Like [`grad_check`] but only visits every `stride`-th coordinate of each
/// parameter (always including index 0).
pub fn grad_check_strided<F>(f: F, params: &ParamSet, eps: f64, stride: usize) -> Result<GradCheckReport, NnError>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet) -> Result<Var, NnError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(NnError::Config(format!("finite-difference eps {eps} outside [1e-7, 1e-4]")));
    }
    let stride = stride.max(1);
    let analytic = {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        tape.backward(out)?
    };

    let eval = |p: &ParamSet| -> Result<f64, NnError> {
        let mut tape = Tape::no_grad();
        let out = f(&mut tape, p)?;
        Ok(tape.value(out).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        max_abs_error: 0.0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.value(&name)?.len();
        let grad = analytic.get(&name);
        for i in (0..n).step_by(stride) {
            let original = params.value(&name)?.data()[i];
            probe.value_mut(&name)?.data_mut()[i] = original + eps;
            let plus = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = original - eps;
            let minus = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            if !a.is_finite() {
                return Err(NnError::NonFinite(name));
            }
            let err = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
