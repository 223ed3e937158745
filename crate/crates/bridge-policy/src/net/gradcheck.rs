//! Central finite-difference verification of the analytic gradients.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so it
//! shares no state with the backward implementation it validates.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::graph::{Graph, NetError, NodeId};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked entries.
    pub max_rel_err: f64,
    /// Entry where it occurred, as `name[i,j]`.
    pub worst: String,
    /// Total number of scalar entries probed.
    pub n_checked: usize,
}

/// Compares analytic gradients against central differences with step `h`.
///
/// `build` must register every input of `inputs` via [`Graph::param`] under
/// the same name and return the scalar loss node. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients<F>(
    inputs: &BTreeMap<String, Array2<f64>>,
    h: f64,
    build: F,
) -> Result<GradCheckReport, NetError>
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId, NetError>,
{
    let eval = |values: &BTreeMap<String, Array2<f64>>| -> Result<f64, NetError> {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, v) in values {
            ids.insert(name.clone(), g.param(name, v.clone()));
        }
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss)[(0, 0)])
    };

    // analytic pass
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, v) in inputs {
        ids.insert(name.clone(), g.param(name, v.clone()));
    }
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss, 1.0)?;

    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    let mut n_checked = 0usize;
    for (name, v) in inputs {
        let analytic = grads.by_name(name).cloned();
        for ((i, j), _) in v.indexed_iter() {
            let mut plus = inputs.clone();
            plus.get_mut(name).expect("present")[(i, j)] += h;
            let mut minus = inputs.clone();
            minus.get_mut(name).expect("present")[(i, j)] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |m| m[(i, j)]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{i},{j}] analytic={a} numeric={numeric}");
            }
            n_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_checked,
    })
}
