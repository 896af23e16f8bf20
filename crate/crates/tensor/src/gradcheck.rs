//! Central finite-difference verification of `Graph::backward`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(|a|, |n|, 1e-5)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub per_param: BTreeMap<String, f64>,
    pub coordinates: usize,
}

/// Denominator floor of [`relative_error`]. Central differences in `f64`
/// with `eps = 1e-5` resolve derivatives of an `O(10)` loss only to about
/// `1e-9` absolute, so smaller magnitudes are compared on that scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradient of `f` from `backward` with central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps`, one coordinate at a time.
///
/// `f` builds a scalar loss from the parameters; it must be deterministic.
/// With `only = Some(names)` just those parameters are perturbed.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    only: Option<&[&str]>,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }
    let names: Vec<String> = match only {
        Some(list) => {
            for n in list {
                store.get(n)?;
            }
            list.iter().map(|s| s.to_string()).collect()
        }
        None => store.names().map(str::to_string).collect(),
    };

    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    check_finite(graph.scalar(loss))?;
    let analytic = graph.backward(loss)?;

    let coords: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .flat_map(|(p, name)| {
            let n = store.get(name).map(|t| t.len()).unwrap_or(0);
            (0..n).map(move |i| (p, i))
        })
        .collect();

    let evaluate = |name: &str, idx: usize, delta: f64| -> Result<f64> {
        let mut perturbed = store.clone();
        let t = perturbed.get_mut(name)?;
        t.data_mut()[idx] += delta;
        let mut g = Graph::new();
        let loss = f(&mut g, &perturbed)?;
        check_finite(g.scalar(loss))
    };

    let errors: Vec<(f64, f64, f64)> = coords
        .par_iter()
        .map(|&(p, idx)| {
            let name = &names[p];
            let plus = evaluate(name, idx, eps)?;
            let minus = evaluate(name, idx, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[idx]);
            Ok((relative_error(a, numeric), a, numeric))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        per_param: names.iter().map(|n| (n.clone(), 0.0)).collect(),
        coordinates: coords.len(),
    };
    for (&(p, idx), &(err, a, n)) in coords.iter().zip(&errors) {
        let entry = report.per_param.get_mut(&names[p]).expect("name listed");
        *entry = entry.max(err);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((names[p].clone(), idx));
            report.worst_values = Some((a, n));
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite(format!("grad_check objective ({v})")))
    }
}
