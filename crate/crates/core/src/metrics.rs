//! Dice / IoU overlap, aggregate evaluation reports, and over/under
//! segmentation overlays on MIPs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{mip, quantize, Axis, Image2D, RgbImage, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl OverlapMetrics {
    /// Two empty masks agree perfectly: dice = iou = 1.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let (dice, iou) = if tp + fp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            let (t, p, n) = (tp as f64, fp as f64, fn_ as f64);
            (2.0 * t / (2.0 * t + p + n), t / (t + p + n))
        };
        OverlapMetrics { dice, iou, tp, fp, fn_ }
    }
}

#[inline]
fn on(v: f32) -> bool {
    v >= 0.5
}

/// Voxels at or above 0.5 count as foreground.
pub fn overlap_metrics(pred: &Volume3D, reference: &Volume3D) -> Result<OverlapMetrics> {
    if pred.dims() != reference.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} and reference {:?} differ", pred.dims(), reference.dims())));
    }
    Ok(overlap_of(pred.data(), reference.data()))
}

/// [`overlap_metrics`] on raw mask values.
pub fn overlap_of(pred: &[f32], reference: &[f32]) -> OverlapMetrics {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &r) in pred.iter().zip(reference) {
        match (on(p), on(r)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    OverlapMetrics::from_counts(tp, fp, fn_)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub id: String,
    #[serde(flatten)]
    pub metrics: OverlapMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_volume: Vec<VolumeResult>,
    pub dice_mean: f64,
    /// Sample standard deviation across volumes.
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

impl EvalReport {
    pub fn from_results(method: impl Into<String>, per_volume: Vec<VolumeResult>) -> Self {
        let dice: Vec<f64> = per_volume.iter().map(|r| r.metrics.dice).collect();
        let iou: Vec<f64> = per_volume.iter().map(|r| r.metrics.iou).collect();
        let (dice_mean, dice_std) = mean_std(&dice);
        let (iou_mean, iou_std) = mean_std(&iou);
        EvalReport { method: method.into(), per_volume, dice_mean, dice_std, iou_mean, iou_std }
    }

    /// One JSON record per volume followed by a summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.per_volume {
            let rec = serde_json::json!({
                "method": self.method, "volume": r.id, "dice": r.metrics.dice, "iou": r.metrics.iou,
                "tp": r.metrics.tp, "fp": r.metrics.fp, "fn": r.metrics.fn_,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "method": self.method, "volumes": self.per_volume.len(),
            "dice_mean": self.dice_mean, "dice_std": self.dice_std,
            "iou_mean": self.iou_mean, "iou_std": self.iou_std,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Per-volume metrics for matched lists of predictions and references.
pub fn evaluate(method: impl Into<String>, ids: &[String], preds: &[Volume3D], refs: &[Volume3D]) -> Result<EvalReport> {
    if preds.len() != refs.len() || ids.len() != preds.len() {
        return Err(Error::LengthMismatch(format!("{} ids, {} predictions, {} references", ids.len(), preds.len(), refs.len())));
    }
    let per_volume = ids
        .iter()
        .zip(preds.iter().zip(refs))
        .map(|(id, (p, r))| Ok(VolumeResult { id: id.clone(), metrics: overlap_metrics(p, r)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_results(method, per_volume))
}

/// Aligned table in percent with two decimals: `method | Dice | IOU`, mean ± sample std.
pub fn render_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 3]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                format!("{:.2} ± {:.2}", 100.0 * r.dice_mean, 100.0 * r.dice_std),
                format!("{:.2} ± {:.2}", 100.0 * r.iou_mean, 100.0 * r.iou_std),
            ]
        })
        .collect();
    let header = ["Method".to_string(), "Dice (%)".to_string(), "IOU (%)".to_string()];
    let width = |c: usize| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0);
    let w = [width(0), width(1), width(2)];
    let line = |r: &[String; 3]| {
        let pad = |s: &str, n: usize| format!("{s}{}", " ".repeat(n - s.chars().count()));
        format!("| {} | {} | {} |\n", pad(&r[0], w[0]), pad(&r[1], w[1]), pad(&r[2], w[2]))
    };
    let mut out = line(&header);
    out.push_str(&format!("|{}|{}|{}|\n", "-".repeat(w[0] + 2), "-".repeat(w[1] + 2), "-".repeat(w[2] + 2)));
    for r in &rows {
        out.push_str(&line(r));
    }
    out.push_str("± is the sample standard deviation across volumes.\n");
    out
}

pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];

/// Colors the MIP of `base`: over-segmentation green, under-segmentation
/// red, agreement white, elsewhere the grayscale base scaled to its range.
pub fn diff_overlay(pred: &Volume3D, reference: &Volume3D, base: &Image2D, axis: Axis) -> Result<RgbImage> {
    if pred.dims() != reference.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} and reference {:?} differ", pred.dims(), reference.dims())));
    }
    let (p, r) = (mip(pred, axis), mip(reference, axis));
    if base.width != p.width || base.height != p.height {
        return Err(Error::ShapeMismatch(format!(
            "base image {}x{} does not match mask MIP {}x{}",
            base.width, base.height, p.width, p.height
        )));
    }
    let (lo, hi) = base.min_max();
    let (lo, hi) = (f64::from(lo), if hi > lo { f64::from(hi) } else { f64::from(lo) + 1.0 });
    let data = p
        .data
        .iter()
        .zip(&r.data)
        .zip(&base.data)
        .map(|((&a, &b), &g)| match (on(a), on(b)) {
            (true, false) => GREEN,
            (false, true) => RED,
            (true, true) => WHITE,
            (false, false) => {
                let q = quantize(g, lo, hi);
                [q, q, q]
            }
        })
        .collect();
    Ok(RgbImage { width: p.width, height: p.height, data })
}
