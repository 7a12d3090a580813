//! Siamese training loop and sliding-window inference.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::checkpoint::Checkpoint;
use crate::deformation::{sample_field_with, warp, DeformationField, DeformationParams};
use crate::error::{Error, Result};
use crate::fpmode;
use crate::losses::{
    consistency_node, mss_loss_node, supervised_loss_node, total_loss_node, ConsistencyCriterion, FocalTverskyParams, MssWeights,
};
use crate::metrics::overlap_of;
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::patches::{extract_grid, sample_epoch, with_prefetch, LabeledVolume, PatchPair, PatchSpec, Reassembler};
use crate::rng::{self, RngState};
use crate::unet::{forward, forward_graph, NetworkConfig, Parameters};
use crate::volume::{Volume3D, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub seed: u64,
    pub patch: PatchSpec,
    /// Adds the consistency term between the two branches.
    pub consistency: bool,
    /// Supervises the deformed branch with the deformed label.
    pub branch2_supervision: bool,
    /// Per-scale weights; `None` picks the default for the network's scale count.
    pub mss_weights: Option<MssWeights>,
    pub focal_tversky: FocalTverskyParams,
    pub criterion: ConsistencyCriterion,
    pub deformation: DeformationParams,
    pub adam: AdamParams,
    /// Save `last.ckpt` every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub prefetch: usize,
    pub threshold: f32,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 50,
            batch_size: 4,
            patches_per_epoch: 8000,
            seed: 0,
            patch: PatchSpec::default(),
            consistency: true,
            branch2_supervision: true,
            mss_weights: None,
            focal_tversky: FocalTverskyParams::default(),
            criterion: ConsistencyCriterion::default(),
            deformation: DeformationParams::default(),
            adam: AdamParams::default(),
            checkpoint_every: 1,
            prefetch: 2,
            threshold: 0.5,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_epoch == 0 {
            return Err(Error::InvalidConfig(format!(
                "epochs {}, batch size {} and patches per epoch {} must be positive",
                self.epochs, self.batch_size, self.patches_per_epoch
            )));
        }
        net.validate()?;
        self.patch.validate()?;
        self.patch.check_network(net)?;
        self.weights(net)?.validate()?;
        self.focal_tversky.validate()?;
        self.criterion.validate()?;
        self.deformation.validate()?;
        self.adam.validate()
    }

    pub fn weights(&self, net: &NetworkConfig) -> Result<MssWeights> {
        let w = self.mss_weights.clone().unwrap_or_else(|| MssWeights::default_for(net.supervision_scales));
        if w.len() != net.supervision_scales {
            return Err(Error::InvalidConfig(format!("{} scale weights for {} supervised scales", w.len(), net.supervision_scales)));
        }
        Ok(w)
    }

    /// Whether the deformed branch is run at all.
    pub fn siamese(&self) -> bool {
        self.consistency || self.branch2_supervision
    }
}

/// The two branch inputs of one batch; branch 2 is branch 1 warped by `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseBatch<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub t: Option<DeformationField>,
    pub tx: Option<Tensor<T>>,
    pub ty: Option<Tensor<T>>,
}

fn stack<T: Real>(vols: &[&Volume3D]) -> Result<Tensor<T>> {
    let dims = vols[0].dims();
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        if v.dims() != dims {
            return Err(Error::ShapeMismatch(format!("patches {dims:?} and {:?} in one batch", v.dims())));
        }
        data.extend(v.data().iter().map(|&x| T::from_f64_lossy(f64::from(x))));
    }
    Tensor::new(vec![vols.len(), 1, dims[0], dims[1], dims[2]], data)
}

impl<T: Real> SiameseBatch<T> {
    pub fn build(pairs: &[PatchPair], t: Option<DeformationField>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let x = stack(&pairs.iter().map(|p| &p.x).collect::<Vec<_>>())?;
        let y = stack(&pairs.iter().map(|p| &p.y).collect::<Vec<_>>())?;
        let (tx, ty) = match &t {
            Some(t) => {
                let wx = pairs.iter().map(|p| warp(&p.x, t)).collect::<Result<Vec<_>>>()?;
                let wy = pairs.iter().map(|p| warp(&p.y, t)).collect::<Result<Vec<_>>>()?;
                (Some(stack(&wx.iter().collect::<Vec<_>>())?), Some(stack(&wy.iter().collect::<Vec<_>>())?))
            }
            None => (None, None),
        };
        Ok(SiameseBatch { x, y, t, tx, ty })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn concat_batch<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// Loss values and gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub sup: f64,
    pub cons: Option<f64>,
    pub total: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Builds the objective for `batch` and returns its gradient. Both branches
/// share one forward pass by stacking them on the batch axis.
pub fn batch_gradients<T: Real>(params: &Parameters<T>, batch: &SiameseBatch<T>, cfg: &TrainRunConfig) -> Result<StepOutput<T>> {
    let net = *params.config();
    let w = cfg.weights(&net)?;
    let b = batch.len();
    let mut g = Graph::<T>::new();
    let pn = params.bind(&mut g, true);
    let two = batch.tx.is_some();
    let (x, y) = match (&batch.tx, &batch.ty) {
        (Some(tx), Some(ty)) => (concat_batch(&batch.x, tx)?, concat_batch(&batch.y, ty)?),
        _ => (batch.x.clone(), batch.y.clone()),
    };
    let xn = g.constant(x);
    let yn = g.constant(y);
    let outs = forward_graph(&mut g, &net, &pn, xn)?;
    let (agg, _) = mss_loss_node(&mut g, &outs, yn, &w, &cfg.focal_tversky)?;
    let (sup, cons) = if two {
        let b1 = g.slice(agg, 0, 0, b)?;
        let b2 = g.slice(agg, 0, b, b)?;
        let sup = supervised_loss_node(&mut g, b1, cfg.branch2_supervision.then_some(b2))?;
        let cons = if cfg.consistency {
            let t = batch.t.as_ref().ok_or_else(|| Error::InvalidConfig("consistency needs a deformation field".into()))?;
            let y1 = g.slice(outs[0], 0, 0, b)?;
            let y2 = g.slice(outs[0], 0, b, b)?;
            Some(consistency_node(&mut g, y1, y2, t, &cfg.criterion)?)
        } else {
            None
        };
        (sup, cons)
    } else {
        (supervised_loss_node(&mut g, agg, None)?, None)
    };
    let total = total_loss_node(&mut g, sup, cons, &cfg.criterion)?;
    let mut grads = g.backward(total)?;
    let grads = pn.iter().zip(params.tensors()).map(|(&n, p)| grads.take(n).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();
    let v = |n: NodeId| g.value(n).item().as_f64();
    Ok(StepOutput { sup: v(sup), cons: cons.map(v), total: v(total), grads })
}

/// Sliding-window inference on the finest scale: probabilities and the
/// `p ≥ threshold` mask.
pub fn predict_volume<T: Real>(params: &Parameters<T>, v: &Volume3D, spec: &PatchSpec, threshold: f32) -> Result<(Volume3D, Volume3D)> {
    spec.check_network(params.config())?;
    fpmode::flush_denormals();
    let grid = extract_grid(v.dims(), spec)?;
    let mut r = Reassembler::new(grid.clone());
    for (i, origin) in grid.windows().enumerate() {
        let crop = v.crop(origin, spec.patch_size)?;
        let x = stack::<T>(&[&crop])?;
        let out = forward(params, &x)?;
        let p: Vec<f32> = out.finest().data().iter().map(|&p| p.as_f64() as f32).collect();
        r.add(i, &p)?;
    }
    let prob = r.finish(VolumeKind::Probability)?.with_spacing(v.spacing())?;
    let mask = prob.threshold(threshold);
    Ok((prob, mask))
}

/// Mean Dice of thresholded predictions against the volumes' labels.
pub fn validation_dice<T: Real>(params: &Parameters<T>, set: &[LabeledVolume], spec: &PatchSpec, threshold: f32) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidConfig("empty validation set".into()));
    }
    let mut s = 0.0;
    for v in set {
        let (_, mask) = predict_volume(params, &v.image, spec, threshold)?;
        s += overlap_of(mask.data(), v.label.data()).dice;
    }
    Ok(s / set.len() as f64)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: String,
    pub epoch: u64,
    pub batch: u64,
    pub sup: f64,
    pub cons: Option<f64>,
    pub total: f64,
    pub val_dice: Option<f64>,
    pub skipped: u64,
    pub wall_time: f64,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub sup: f64,
    pub cons: Option<f64>,
    pub total: f64,
    pub val_dice: Option<f64>,
    pub skipped: u64,
}

pub const LOG_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Training state: parameters, optimizer, streams, best validation score.
pub struct Trainer<T> {
    pub cfg: TrainRunConfig,
    pub params: Parameters<T>,
    pub adam: AdamState<T>,
    pub epoch: u64,
    pub best: Option<(f64, u64)>,
    pub best_params: Option<Parameters<T>>,
    patch_rng: ChaCha8Rng,
    deform_rng: ChaCha8Rng,
    batches: u64,
    out: Option<PathBuf>,
    started: Instant,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: &NetworkConfig, cfg: TrainRunConfig) -> Result<Self> {
        cfg.validate(net)?;
        let params = Parameters::build(net, cfg.seed)?;
        let adam = AdamState::for_params(&params, cfg.adam);
        Ok(Trainer {
            patch_rng: rng::stream(cfg.seed, rng::STREAM_PATCHES),
            deform_rng: rng::stream(cfg.seed, rng::STREAM_DEFORM),
            cfg,
            params,
            adam,
            epoch: 0,
            best: None,
            best_params: None,
            batches: 0,
            out: None,
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint<T>, cfg: TrainRunConfig) -> Result<Self> {
        cfg.validate(ck.params.config())?;
        let stream = |name: &str| {
            ck.rng.get(name).map(RngState::restore).ok_or_else(|| Error::MalformedCheckpoint(format!("missing rng stream {name:?}")))
        };
        let best = match (ck.meta.get("best_val").and_then(|v| v.as_f64()), ck.meta.get("best_epoch").and_then(|v| v.as_u64())) {
            (Some(d), Some(e)) => Some((d, e)),
            _ => None,
        };
        let batches = ck.meta.get("batches").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut adam = ck.adam;
        adam.hyper = cfg.adam;
        Ok(Trainer {
            patch_rng: stream(rng::STREAM_PATCHES)?,
            deform_rng: stream(rng::STREAM_DEFORM)?,
            cfg,
            params: ck.params,
            adam,
            epoch: ck.epoch,
            best,
            best_params: None,
            batches,
            out: None,
            started: Instant::now(),
        })
    }

    /// Writes the log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out = Some(dir);
        Ok(self)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut rng = BTreeMap::new();
        rng.insert(rng::STREAM_PATCHES.to_string(), RngState::capture(&self.patch_rng));
        rng.insert(rng::STREAM_DEFORM.to_string(), RngState::capture(&self.deform_rng));
        let mut meta = serde_json::json!({ "batches": self.batches, "seed": self.cfg.seed });
        if let Some((d, e)) = self.best {
            meta["best_val"] = serde_json::json!(d);
            meta["best_epoch"] = serde_json::json!(e);
        }
        Checkpoint { params: self.params.clone(), adam: self.adam.clone(), epoch: self.epoch, rng, meta }
    }

    fn emit(&self, rec: &LogRecord, sink: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        sink(rec);
        if let Some(dir) = &self.out {
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", rec.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// One epoch of patch draws followed by validation when `val` is non-empty.
    pub fn run_epoch(&mut self, train: &[LabeledVolume], val: &[LabeledVolume], sink: &mut dyn FnMut(&LogRecord)) -> Result<EpochSummary> {
        fpmode::flush_denormals();
        let cfg = self.cfg.clone();
        let epoch = self.epoch + 1;
        let draws = sample_epoch(train, &cfg.patch, cfg.patches_per_epoch, &mut self.patch_rng)?;
        let (mut sum_sup, mut sum_cons, mut sum_total, mut n, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0u64);
        let mut records = Vec::new();
        with_prefetch(draws, cfg.prefetch.max(1), |it| -> Result<()> {
            loop {
                let pairs: Vec<PatchPair> = (&mut *it).take(cfg.batch_size).collect::<Result<_>>()?;
                if pairs.is_empty() {
                    return Ok(());
                }
                let t = if cfg.siamese() {
                    Some(sample_field_with(cfg.patch.patch_size, &cfg.deformation, &mut self.deform_rng, self.batches)?)
                } else {
                    None
                };
                let batch = SiameseBatch::<T>::build(&pairs, t)?;
                let step = batch_gradients(&self.params, &batch, &cfg)?;
                self.batches += 1;
                match adam_step(&mut self.params, &step.grads, &mut self.adam) {
                    Ok(()) => {}
                    Err(Error::NonFinite(what)) => {
                        log::warn!("skipping batch {}: non-finite {what}", self.batches);
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                if !step.total.is_finite() {
                    skipped += 1;
                    continue;
                }
                sum_sup += step.sup;
                sum_cons += step.cons.unwrap_or(0.0);
                sum_total += step.total;
                n += 1;
                records.push(LogRecord {
                    kind: "batch".into(),
                    epoch,
                    batch: self.batches,
                    sup: step.sup,
                    cons: step.cons,
                    total: step.total,
                    val_dice: None,
                    skipped: 0,
                    wall_time: self.started.elapsed().as_secs_f64(),
                });
            }
        })?;
        for r in &records {
            self.emit(r, sink)?;
        }
        let val_dice = if val.is_empty() { None } else { Some(validation_dice(&self.params, val, &cfg.patch, cfg.threshold)?) };
        self.epoch = epoch;
        let nf = n.max(1) as f64;
        let summary = EpochSummary {
            epoch,
            sup: sum_sup / nf,
            cons: cfg.consistency.then_some(sum_cons / nf),
            total: sum_total / nf,
            val_dice,
            skipped,
        };
        if let Some(d) = val_dice {
            if self.best.is_none_or(|(b, _)| d > b) {
                self.best = Some((d, epoch));
                self.best_params = Some(self.params.clone());
                if let Some(dir) = &self.out {
                    self.checkpoint().save(dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        let rec = LogRecord {
            kind: "epoch".into(),
            epoch,
            batch: self.batches,
            sup: summary.sup,
            cons: summary.cons,
            total: summary.total,
            val_dice,
            skipped,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.emit(&rec, sink)?;
        if let Some(dir) = &self.out {
            let every = self.cfg.checkpoint_every;
            if (every > 0 && epoch % every as u64 == 0) || epoch == self.cfg.epochs as u64 {
                self.checkpoint().save(dir.join(LAST_CHECKPOINT))?;
            }
        }
        Ok(summary)
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn fit(&mut self, train: &[LabeledVolume], val: &[LabeledVolume], sink: &mut dyn FnMut(&LogRecord)) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs as u64 {
            out.push(self.run_epoch(train, val, sink)?);
        }
        Ok(out)
    }

    /// Parameters of the best validation epoch, or the current ones.
    pub fn best_or_current(&self) -> &Parameters<T> {
        self.best_params.as_ref().unwrap_or(&self.params)
    }
}

/// Loads a metrics log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display()))))
        .collect()
}

/// A single-label volume as a probability map, for constant predictors in tests.
pub fn probability_volume(dims: [usize; 3], value: f32) -> Result<Volume3D> {
    Volume3D::from_fn(dims, VolumeKind::Probability, |_, _, _| value)
}
