//! Central finite-difference validation of analytic gradients.

use super::{DiffError, ParamStore, Tape, Tensor, Var};

/// Outcome of a gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over entries of `|analytic - cd| / max(|analytic|, |cd|, 1e-12)`.
    pub max_rel_error: f64,
    /// Parameter name and flat entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error used throughout gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

fn eval_value<E, F>(f: &mut F, params: &ParamStore) -> Result<f64, E>
where
    E: From<DiffError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let v = tape
        .value(root)
        .item()
        .ok_or(DiffError::NotScalar(tape.shape(root)))?;
    if !v.is_finite() {
        return Err(DiffError::NonFinite { op: "finite_diff_check" }.into());
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with the given `step`, over every parameter entry.
pub fn finite_diff_check<E, F>(params: &ParamStore, step: f64, mut f: F) -> Result<GradCheck, E>
where
    E: From<DiffError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    let mut work = params.clone();
    let mut tape = Tape::new();
    let root = f(&mut tape, &work)?;
    tape.backward(root, &mut work)?;
    let analytic = work.grads_snapshot();
    drop(tape);
    compare_with_finite_differences(params, &analytic, step, f)
}

/// Same comparison with externally supplied analytic gradients (one tensor
/// per parameter, in store order).
pub fn compare_with_finite_differences<E, F>(
    params: &ParamStore,
    analytic: &[Tensor],
    step: f64,
    mut f: F,
) -> Result<GradCheck, E>
where
    E: From<DiffError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(DiffError::InvalidArgument("finite-difference step must be positive").into());
    }
    if analytic.len() != params.len() {
        return Err(DiffError::InvalidArgument("one analytic gradient per parameter required").into());
    }
    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for id in params.ids() {
        let g = &analytic[id.index()];
        if g.shape() != params.value(id).shape() {
            return Err(DiffError::ShapeMismatch {
                op: "finite_diff_check",
                lhs: params.value(id).shape(),
                rhs: g.shape(),
            }
            .into());
        }
        for k in 0..g.len() {
            let orig = params.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval_value(&mut f, &work)?;
            work.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval_value(&mut f, &work)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(g.data()[k], numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report = GradCheck {
                    max_rel_error: err.max(report.max_rel_error),
                    worst: Some((params.name(id).to_string(), k)),
                    analytic: g.data()[k],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
