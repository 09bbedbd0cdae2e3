use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// One probed scalar in a gradient check.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Largest offenders first.
    pub worst: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences, over every scalar of every parameter in `params`.
///
/// The error per scalar is `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: for<'a, 'b> FnMut(&'a mut Graph<'b>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient check at unperturbed parameters".into(),
            });
        }
        let grads = g.backward(out)?;
        params
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; store.value(id).len()])
            })
            .collect()
    };

    let mut eval = |store: &ParamStore, what: &str, idx: usize| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: format!("gradient-check probe of {what}[{idx}]"),
            })
        }
    };

    let mut results = Vec::new();
    for (&id, grad) in params.iter().zip(&analytic) {
        let name = store.get(id).name.clone();
        for idx in 0..store.value(id).len() {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + eps;
            let plus = eval(store, &name, idx);
            store.value_mut(id).data_mut()[idx] = orig - eps;
            let minus = eval(store, &name, idx);
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad[idx];
            let rel_error = (a - numeric).abs() / a.abs().max(1.0);
            results.push(ProbeResult {
                param: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    results.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = results.first().map_or(0.0, |r| r.rel_error);
    let probes = results.len();
    results.truncate(10);
    Ok(GradCheckReport {
        max_rel_error,
        probes,
        worst: results,
    })
}
