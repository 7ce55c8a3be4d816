//! Central finite-difference gradient checking.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks the gradient of a scalar-valued `f` at `point` over every coordinate.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point, and returns the scalar output node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// Like [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= point.numel()) {
        return Err(Error::InvalidArgument(format!(
            "coordinate {bad} out of range for {} values",
            point.numel()
        )));
    }

    let mut graph = Graph::new();
    let leaf = graph.param(point.clone())?;
    let out = f(&mut graph, leaf)?;
    let grads = graph.backward(out)?;
    let analytic = grads.get(leaf).expect("leaf requires grad").clone();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(p)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || i == coords[0] {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
