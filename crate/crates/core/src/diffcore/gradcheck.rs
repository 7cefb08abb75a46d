use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Largest discrepancy found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::Shape("grad_check needs a scalar function".into()));
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Reverse-mode gradients of `f` for each of `params`, zero-filled where a
/// parameter does not reach the output.
pub fn analytic_gradient<F>(store: &ParamStore, params: &[ParamId], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    Ok(params
        .iter()
        .map(|&id| grads.dense(id, store.get(id).len()))
        .collect())
}

/// Central differences `(f(θ+eps) - f(θ-eps)) / 2eps`, one coordinate at a time.
pub fn numeric_gradient<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    f: &F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.get(id).len();
        let mut grad = vec![0.0; n];
        for (k, slot) in grad.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval_scalar(store, f);
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval_scalar(store, f);
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (plus? - minus?) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

pub fn compare_gradients(
    store: &ParamStore,
    params: &[ParamId],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for ((&id, a), n) in params.iter().zip(analytic).zip(numeric) {
        for (k, (&x, &y)) in a.iter().zip(n).enumerate() {
            report.coordinates += 1;
            let e = relative_error(x, y);
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    report
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences over every coordinate of `params`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradient(store, params, &f)?;
    let numeric = numeric_gradient(store, params, eps, &f)?;
    Ok(compare_gradients(store, params, &analytic, &numeric))
}
