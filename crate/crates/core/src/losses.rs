//! Focal-Tversky loss, multi-scale aggregation, the two-branch supervised
//! loss, and the deformation-consistency term.
//!
//! The `*_node` functions build the loss on a [`Graph`] so it can be
//! differentiated; the plain functions evaluate the same formulas on values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::deformation::DeformationField;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalTverskyParams {
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for FocalTverskyParams {
    fn default() -> Self {
        FocalTverskyParams { alpha: 0.7, beta: 0.3, gamma: 4.0 / 3.0, epsilon: 1e-6 }
    }
}

impl FocalTverskyParams {
    /// Checks the invariants. `epsilon = 0` is accepted for exact set-count
    /// comparisons; training configs keep it positive.
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && (self.alpha + self.beta - 1.0).abs() < 1e-9
            && self.gamma > 0.0
            && self.gamma.is_finite()
            && self.epsilon >= 0.0
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "focal-Tversky needs alpha, beta >= 0 with alpha + beta = 1, gamma > 0, epsilon >= 0; got {self:?}"
            )))
        }
    }
}

/// Per-scale weights `α_1..α_m`, index 0 = finest scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssWeights {
    pub alphas: Vec<f64>,
}

impl MssWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        let w = MssWeights { alphas };
        w.validate()?;
        Ok(w)
    }

    /// `(1.0, 0.75, 0.5, …)` truncated to `m`, never below 0.25.
    pub fn default_for(m: usize) -> Self {
        MssWeights { alphas: (0..m).map(|i| (1.0 - 0.25 * i as f64).max(0.25)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || !self.alphas.iter().any(|&a| a > 0.0) {
            return Err(Error::InvalidParams(format!(
                "scale weights must be finite, nonnegative, and not all zero; got {:?}",
                self.alphas
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// Per-scale losses and their weighted aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MssLossBreakdown {
    pub per_scale: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyKind {
    MeanSquared,
    /// Focal-Tversky of the branch-2 prediction against the warped branch-1
    /// prediction used as a soft target.
    FocalTverskySoft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCriterion {
    pub kind: ConsistencyKind,
    pub weight: f64,
}

impl Default for ConsistencyCriterion {
    fn default() -> Self {
        ConsistencyCriterion { kind: ConsistencyKind::MeanSquared, weight: 1.0 }
    }
}

impl ConsistencyCriterion {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::InvalidParams(format!("consistency weight {} must be >= 0", self.weight)));
        }
        Ok(())
    }
}

fn check_same_shape<T: Real>(g: &Graph<T>, a: NodeId, b: NodeId) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch(format!("loss operands have shapes {sa:?} and {sb:?}")));
    }
    Ok(())
}

/// Focal-Tversky loss of each sample, shape `[batch]`. `p` and `y` are
/// rank-5 with the batch on axis 0.
pub fn focal_tversky_node<T: Real>(g: &mut Graph<T>, p: NodeId, y: NodeId, ft: &FocalTverskyParams) -> Result<NodeId> {
    ft.validate()?;
    check_same_shape(g, p, y)?;
    let py = g.mul(p, y)?;
    let tp = g.batch_sum(py)?;
    let sp = g.batch_sum(p)?;
    let sy = g.batch_sum(y)?;
    let fneg = g.sub(sy, tp)?;
    let fpos = g.sub(sp, tp)?;
    let num = g.add_scalar(tp, ft.epsilon)?;
    let a = g.mul_scalar(fneg, ft.alpha)?;
    let b = g.mul_scalar(fpos, ft.beta)?;
    let den = g.add(tp, a)?;
    let den = g.add(den, b)?;
    let den = g.add_scalar(den, ft.epsilon)?;
    let ti = g.div(num, den)?;
    let one_minus = g.mul_scalar(ti, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    g.pow(one_minus, 1.0 / ft.gamma)
}

/// Focal-Tversky loss of one prediction/label pair.
pub fn focal_tversky(p: &[f64], y: &[f64], ft: &FocalTverskyParams) -> Result<f64> {
    ft.validate()?;
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::ShapeMismatch(format!("prediction has {} values, label {}", p.len(), y.len())));
    }
    let (mut tp, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(y) {
        tp += a * b;
        sp += a;
        sy += b;
    }
    let ti = (tp + ft.epsilon) / (tp + ft.alpha * (sy - tp) + ft.beta * (sp - tp) + ft.epsilon);
    if !ti.is_finite() {
        return Err(Error::NonFinite("Tversky index of an empty pair with epsilon = 0".into()));
    }
    Ok((1.0 - ti).max(0.0).powf(1.0 / ft.gamma))
}

/// Weighted mean of per-scale losses: `Σ α_i ℓ_i / Σ α_i`.
pub fn mss_aggregate(per_scale: &[f64], w: &MssWeights) -> Result<MssLossBreakdown> {
    w.validate()?;
    if per_scale.len() != w.len() {
        return Err(Error::ShapeMismatch(format!("{} scale losses but {} weights", per_scale.len(), w.len())));
    }
    let norm: f64 = w.alphas.iter().sum();
    let total = per_scale.iter().zip(&w.alphas).map(|(l, a)| a * l).sum::<f64>() / norm;
    Ok(MssLossBreakdown { per_scale: per_scale.to_vec(), total })
}

/// Multi-scale loss per sample on the graph. Returns the aggregate `[batch]`
/// node and the per-scale `[batch]` nodes.
pub fn mss_loss_node<T: Real>(
    g: &mut Graph<T>,
    outputs: &[NodeId],
    y: NodeId,
    w: &MssWeights,
    ft: &FocalTverskyParams,
) -> Result<(NodeId, Vec<NodeId>)> {
    w.validate()?;
    if outputs.len() != w.len() {
        return Err(Error::ShapeMismatch(format!("{} outputs but {} scale weights", outputs.len(), w.len())));
    }
    let norm: f64 = w.alphas.iter().sum();
    let mut per_scale = Vec::with_capacity(outputs.len());
    let mut acc: Option<NodeId> = None;
    for (&o, &a) in outputs.iter().zip(&w.alphas) {
        let l = focal_tversky_node(g, o, y, ft)?;
        per_scale.push(l);
        let term = g.mul_scalar(l, a / norm)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok((acc.expect("at least one scale"), per_scale))
}

/// Multi-scale loss of value tensors, one breakdown per sample.
pub fn mss_loss<T: Real>(outputs: &[Tensor<T>], y: &Tensor<T>, w: &MssWeights, ft: &FocalTverskyParams) -> Result<Vec<MssLossBreakdown>> {
    let mut g = Graph::<T>::new();
    let nodes: Vec<NodeId> = outputs.iter().map(|o| g.constant(o.clone())).collect();
    let yn = g.constant(y.clone());
    let (_, per_scale) = mss_loss_node(&mut g, &nodes, yn, w, ft)?;
    let batch = y.shape()[0];
    (0..batch)
        .map(|b| {
            let ls: Vec<f64> = per_scale.iter().map(|&n| g.value(n).data()[b].as_f64()).collect();
            mss_aggregate(&ls, w)
        })
        .collect()
}

/// Batch mean of the per-sample sums of the two branch losses.
pub fn supervised_loss_node<T: Real>(g: &mut Graph<T>, branch1: NodeId, branch2: Option<NodeId>) -> Result<NodeId> {
    let s = match branch2 {
        Some(b2) => {
            check_same_shape(g, branch1, b2)?;
            g.add(branch1, b2)?
        }
        None => branch1,
    };
    g.mean(s)
}

/// Batch mean of `branch1[i].total + branch2[i].total`.
pub fn supervised_loss(branch1: &[MssLossBreakdown], branch2: &[MssLossBreakdown]) -> Result<f64> {
    if branch1.len() != branch2.len() || branch1.is_empty() {
        return Err(Error::ShapeMismatch(format!("branch batch sizes {} and {}", branch1.len(), branch2.len())));
    }
    let s: f64 = branch1.iter().zip(branch2).map(|(a, b)| a.total + b.total).sum();
    Ok(s / branch1.len() as f64)
}

/// Consistency between `warp(ŷ₁, t)` and `ŷ₂` on the graph. Gradients flow
/// into both branches.
pub fn consistency_node<T: Real>(
    g: &mut Graph<T>,
    y1: NodeId,
    y2: NodeId,
    t: &DeformationField,
    crit: &ConsistencyCriterion,
) -> Result<NodeId> {
    crit.validate()?;
    check_same_shape(g, y1, y2)?;
    let shape = g.value(y1).shape().to_vec();
    if shape.len() != 5 || shape[2..] != t.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {shape:?} does not match field dims {:?}", t.dims())));
    }
    let blocks = shape[0] * shape[1];
    let warped = g.gather(y1, Arc::new(t.gather_indices_blocked(blocks)), shape)?;
    match crit.kind {
        ConsistencyKind::MeanSquared => {
            let d = g.sub(warped, y2)?;
            let d2 = g.mul(d, d)?;
            g.mean(d2)
        }
        ConsistencyKind::FocalTverskySoft => {
            let per = focal_tversky_node(g, y2, warped, &FocalTverskyParams::default())?;
            g.mean(per)
        }
    }
}

/// Consistency of two value tensors under field `t`.
pub fn consistency_loss<T: Real>(y1: &Tensor<T>, y2: &Tensor<T>, t: &DeformationField, crit: &ConsistencyCriterion) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let a = g.constant(y1.clone());
    let b = g.constant(y2.clone());
    let c = consistency_node(&mut g, a, b, t, crit)?;
    Ok(g.value(c).item().as_f64())
}

/// `sup + λ·cons` on the graph.
pub fn total_loss_node<T: Real>(g: &mut Graph<T>, sup: NodeId, cons: Option<NodeId>, crit: &ConsistencyCriterion) -> Result<NodeId> {
    match cons {
        Some(c) if crit.weight != 0.0 => {
            let wc = g.mul_scalar(c, crit.weight)?;
            g.add(sup, wc)
        }
        _ => Ok(sup),
    }
}

pub fn total_loss(sup: f64, cons: f64, crit: &ConsistencyCriterion) -> Result<f64> {
    if !sup.is_finite() || !cons.is_finite() {
        return Err(Error::NonFinite(format!("loss terms sup = {sup}, cons = {cons}")));
    }
    crit.validate()?;
    Ok(sup + crit.weight * cons)
}
