use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose `±h` stencil changes a ReLU sign, max-pool
    /// winner or power clamp; central differences are meaningless there.
    pub skipped: usize,
    pub pass: bool,
}

/// Checks `f` at `x` elementwise with `rel = |a - n| / max(|a|, |n|, 1e-8)`,
/// skipping coordinates whose stencil crosses a non-differentiable point.
///
/// `f` builds a scalar-valued program on the given graph from the input node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    g.track_branches();
    let xi = g.param(x.clone());
    let root = f(&mut g, xi)?;
    if !g.value(root).is_scalar() {
        return Err(Error::RootNotScalar(g.value(root).shape().to_vec()));
    }
    let grads = g.backward(root)?;
    let analytic = grads.get(xi).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let base = g.branch_signature();
    let eval = |t: Tensor<f64>| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::new();
        g.track_branches();
        let xi = g.constant(t);
        let r = f(&mut g, xi)?;
        Ok((g.value(r).item(), g.branch_signature()))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0, skipped: 0, pass: true };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let ((fp, sp), (fm, sm)) = (eval(plus)?, eval(minus)?);
        if sp != base || sm != base {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.pass = report.checked > 0 && report.max_rel_err.is_finite() && report.max_rel_err < tol;
    Ok(report)
}
