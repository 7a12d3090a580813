use std::fs;
use std::path::{Path, PathBuf};

use vseg_core::autodiff::Real;
use vseg_core::checkpoint::Checkpoint;
use vseg_core::deformation::{sample_field, warp, DeformationParams};
use vseg_core::frangi::{frangi_multiscale, VesselnessParams};
use vseg_core::losses::{ConsistencyCriterion, FocalTverskyParams, MssWeights};
use vseg_core::metrics::{diff_overlay, evaluate, render_table, EvalReport};
use vseg_core::optim::AdamParams;
use vseg_core::patches::{LabeledVolume, PatchSpec};
use vseg_core::phantom::{make_dataset, read_manifest, write_dataset, PhantomConfig, Split, MANIFEST_FILE};
use vseg_core::trainer::{predict_volume, TrainRunConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};
use vseg_core::unet::{NetworkConfig, Parameters};
use vseg_core::volume::{
    mip, overlay_mask, read_volume, write_mip_png, write_nifti, write_raw, write_rgb_png, Axis, Image2D, Volume3D, VolumeHeaderInfo,
    VolumeKind,
};

use crate::args::{DeformArgs, EvaluateArgs, FieldFormat, FrangiArgs, LabelSet, MipArgs, PhantomArgs, Precision, PredictArgs, TrainArgs};

/// A failed command: bad input (exit 1) or a failure while running (exit 2).
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<vseg_core::Error> for Failure {
    fn from(e: vseg_core::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

pub type Outcome = Result<Vec<PathBuf>, Failure>;

const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];

fn mkdir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn is_volume(p: &Path) -> bool {
    let name = p.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".raw")
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".raw"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name
}

/// A single volume, or the volumes of a directory in name order.
fn volume_paths(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(io_err(input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_volume(p))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Failure::Invalid(format!("no volumes in {}", input.display())));
        }
        Ok(v)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Failure::Runtime(format!("{}: no such file or directory", input.display())))
    }
}

fn save(v: &Volume3D, path: &Path, description: &str) -> Result<PathBuf, Failure> {
    write_nifti(v, path, &VolumeHeaderInfo::new(vseg_core::volume::NiftiDatatype::for_kind(v.kind()), description))?;
    Ok(path.to_path_buf())
}

/// Writes a MIP scaled to its own range.
fn write_auto_png(img: &Image2D, path: &Path) -> Result<(), Failure> {
    let (lo, hi) = img.min_max();
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    write_mip_png(img, path, (lo, if hi > lo { hi } else { lo + 1.0 }))?;
    Ok(())
}

pub fn phantom(a: &PhantomArgs) -> Outcome {
    let cfg = PhantomConfig {
        dims: a.dims.0,
        spacing: a.spacing.0,
        vessel_count: (a.vessels.0, a.vessels.1),
        radius_range: (a.radius.0, a.radius.1),
        waypoints: a.waypoints,
        vessel_intensity: a.vessel_intensity,
        background_intensity: a.background_intensity,
        noise_sigma: a.noise_sigma,
        blur_sigma: a.blur_sigma,
        gap_probability: a.gap_probability,
        gap_segment_length: a.gap_segment_length,
        gap_length: a.gap_length,
    };
    let ds = make_dataset(a.n, &cfg, a.seed)?;
    mkdir(&a.out)?;
    let m = write_dataset(&ds, &a.out)?;
    let count = |s: Split| m.volumes.iter().filter(|v| v.split == s).count();
    log::info!(
        "wrote {} phantoms to {} (train {}, val {}, test {})",
        m.volumes.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    let mut out = vec![a.out.join(MANIFEST_FILE)];
    for v in &m.volumes {
        out.extend([&v.image, &v.label, &v.label_noisy].map(|p| a.out.join(p)));
    }
    Ok(out)
}

fn network_config(a: &TrainArgs) -> NetworkConfig {
    NetworkConfig {
        depth: a.depth,
        base_channels: a.base_channels,
        supervision_scales: a.mss,
        normalization: a.normalization.into(),
        ..NetworkConfig::default()
    }
}

fn run_config(a: &TrainArgs) -> Result<TrainRunConfig, Failure> {
    Ok(TrainRunConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        patches_per_epoch: a.patches_per_epoch,
        seed: a.seed,
        patch: PatchSpec { patch_size: a.patch_size.0, stride: a.stride.0 },
        consistency: a.consistency.0,
        branch2_supervision: a.branch2_supervision.0,
        mss_weights: a.mss_weights.as_ref().map(|l| MssWeights::new(l.0.clone())).transpose()?,
        focal_tversky: FocalTverskyParams { alpha: a.ft_alpha, beta: a.ft_beta, gamma: a.ft_gamma, epsilon: a.ft_epsilon },
        criterion: ConsistencyCriterion { kind: a.consistency_criterion.into(), weight: a.consistency_weight },
        deformation: DeformationParams {
            scale_range: (a.deform_scale.0, a.deform_scale.1),
            kernel_size: a.deform_kernel_size,
            kernel_sigma: a.deform_kernel_sigma,
            noise: a.deform_noise.into(),
            shared_across_slices: a.deform_shared.0,
        },
        adam: AdamParams { lr: a.lr, beta1: a.adam_beta1, beta2: a.adam_beta2, eps: a.adam_eps },
        checkpoint_every: a.checkpoint_every,
        prefetch: a.prefetch,
        threshold: a.threshold,
    })
}

struct Split3 {
    train: Vec<LabeledVolume>,
    val: Vec<LabeledVolume>,
    test: Vec<(String, Volume3D, Volume3D)>,
}

fn load_dataset(dir: &Path, labels: LabelSet) -> Result<Split3, Failure> {
    let m = read_manifest(dir)?;
    let mut s = Split3 { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for e in &m.volumes {
        let image = read_volume(dir.join(&e.image))?;
        match e.split {
            Split::Test => s.test.push((e.id.clone(), image, read_volume(dir.join(&e.label))?)),
            split => {
                let label = read_volume(dir.join(match labels {
                    LabelSet::Noisy => &e.label_noisy,
                    LabelSet::Clean => &e.label,
                }))?;
                let lv = LabeledVolume { image, label };
                if split == Split::Train {
                    s.train.push(lv)
                } else {
                    s.val.push(lv)
                }
            }
        }
    }
    if s.train.is_empty() {
        return Err(Failure::Invalid(format!("{} has no training volumes", dir.display())));
    }
    Ok(s)
}

pub fn train(a: &TrainArgs) -> Outcome {
    match a.precision {
        Precision::F32 => train_as::<f32>(a),
        Precision::F64 => train_as::<f64>(a),
    }
}

fn train_as<T: Real>(a: &TrainArgs) -> Outcome {
    let cfg = run_config(a)?;
    let net = network_config(a);
    let data = load_dataset(&a.data, a.labels)?;
    log::info!("{} training, {} validation, {} test volumes", data.train.len(), data.val.len(), data.test.len());
    let trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if *ck.params.config() != net {
                log::warn!("architecture flags ignored; resuming with the checkpoint's {:?}", ck.params.config());
            }
            log::info!("resuming {} at epoch {}", path.display(), ck.epoch);
            Trainer::resume(ck, cfg)?
        }
        None => Trainer::<T>::new(&net, cfg)?,
    };
    let mut trainer = trainer.with_output(&a.out)?;
    log::info!("{} parameters", trainer.params.count());
    trainer.fit(&data.train, &data.val, &mut |rec| {
        if rec.kind == "epoch" {
            match rec.val_dice {
                Some(d) => log::info!("epoch {} loss {:.4} val dice {:.4}", rec.epoch, rec.total, d),
                None => log::info!("epoch {} loss {:.4}", rec.epoch, rec.total),
            }
        } else {
            log::debug!("{}", rec.to_json());
        }
    })?;
    let mut out = vec![a.out.join(LOG_FILE), a.out.join(LAST_CHECKPOINT)];
    let best_path = a.out.join(BEST_CHECKPOINT);
    if best_path.exists() {
        out.push(best_path.clone());
    }
    if let Some((d, e)) = trainer.best {
        log::info!("best validation dice {d:.4} at epoch {e}");
    }
    if a.predict_test.0 && !data.test.is_empty() {
        let params: Parameters<T> = if best_path.exists() { Checkpoint::<T>::load(&best_path)?.params } else { trainer.params.clone() };
        out.extend(predict_test(&params, &data.test, &trainer.cfg, &a.out)?);
    }
    Ok(out)
}

fn predict_test<T: Real>(params: &Parameters<T>, test: &[(String, Volume3D, Volume3D)], cfg: &TrainRunConfig, out: &Path) -> Outcome {
    let (pdir, mdir) = (out.join("test_probabilities"), out.join("test_masks"));
    mkdir(&pdir)?;
    mkdir(&mdir)?;
    let mut written = Vec::new();
    let (mut ids, mut preds, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    for (id, image, label) in test {
        let (prob, mask) = predict_volume(params, image, &cfg.patch, cfg.threshold)?;
        written.push(save(&prob, &pdir.join(format!("{id}.nii")), id)?);
        written.push(save(&mask, &mdir.join(format!("{id}.nii")), id)?);
        ids.push(id.clone());
        preds.push(mask);
        refs.push(label.clone());
    }
    let report = evaluate("model", &ids, &preds, &refs)?;
    written.push(write_report(&report, &out.join("test_report.jsonl"))?);
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(written)
}

fn write_report(r: &EvalReport, path: &Path) -> Result<PathBuf, Failure> {
    fs::write(path, r.to_jsonl()).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

pub fn predict(a: &PredictArgs) -> Outcome {
    let params = Checkpoint::<f32>::load(&a.checkpoint)?.params;
    let spec = PatchSpec { patch_size: a.patch_size.0, stride: a.stride.0 };
    let inputs = volume_paths(&a.input)?;
    let dirs = ["probabilities", "masks", "overlays"].map(|d| a.out.join(d));
    for d in &dirs {
        mkdir(d)?;
    }
    let mut out = Vec::new();
    for path in inputs {
        let id = stem(&path);
        let v = read_volume(&path)?;
        let (prob, mask) = predict_volume(&params, &v, &spec, a.threshold)?;
        let voxels = mask.data().iter().filter(|&&m| m > 0.5).count();
        log::info!("{id}: {voxels} foreground voxels");
        out.push(save(&prob, &dirs[0].join(format!("{id}.nii")), &id)?);
        out.push(save(&mask, &dirs[1].join(format!("{id}.nii")), &id)?);
        let png = dirs[2].join(format!("{id}.png"));
        write_rgb_png(&overlay_mask(&v, &mask, a.axis.into(), OVERLAY_COLOR)?, &png)?;
        out.push(png);
    }
    Ok(out)
}

/// Pairs prediction and reference files: two files, or the files of `pred`
/// that have a namesake in `reference`.
fn pair_files(pred: &Path, reference: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, Failure> {
    for p in [pred, reference] {
        if !p.exists() {
            return Err(Failure::Runtime(format!("{}: no such file or directory", p.display())));
        }
    }
    if pred.is_dir() != reference.is_dir() {
        return Err(Failure::Invalid("--pred and --ref must both be files or both be directories".into()));
    }
    if !pred.is_dir() {
        return Ok(vec![(stem(pred), pred.to_path_buf(), reference.to_path_buf())]);
    }
    let mut pairs = Vec::new();
    for p in volume_paths(pred)? {
        let r = reference.join(p.file_name().unwrap_or_default());
        if r.exists() {
            pairs.push((stem(&p), p, r));
        } else {
            log::warn!("no reference for {}", p.display());
        }
    }
    if pairs.is_empty() {
        return Err(Failure::Invalid(format!("no file in {} has a namesake in {}", pred.display(), reference.display())));
    }
    Ok(pairs)
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Outcome {
    let pairs = pair_files(&a.pred, &a.reference)?;
    let (mut ids, mut preds, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    for (id, p, r) in &pairs {
        ids.push(id.clone());
        preds.push(read_volume(p)?.threshold(a.threshold));
        refs.push(read_volume(r)?.threshold(0.5));
    }
    let report = evaluate(a.method.as_str(), &ids, &preds, &refs)?;
    mkdir(&a.out)?;
    let mut out = vec![write_report(&report, &a.out.join("report.jsonl"))?];
    if let Some(images) = &a.images {
        let odir = a.out.join("overlays");
        mkdir(&odir)?;
        let axis: Axis = a.axis.into();
        for ((id, p, _), (pred, reference)) in pairs.iter().zip(preds.iter().zip(&refs)) {
            let img = if images.is_dir() { images.join(p.file_name().unwrap_or_default()) } else { images.clone() };
            let base = mip(&read_volume(&img)?, axis);
            let png = odir.join(format!("{id}.png"));
            write_rgb_png(&diff_overlay(pred, reference, &base, axis)?, &png)?;
            out.push(png);
        }
    }
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(out)
}

pub fn deform(a: &DeformArgs) -> Outcome {
    let params = DeformationParams {
        scale_range: (a.scale.0, a.scale.1),
        kernel_size: a.kernel_size,
        kernel_sigma: a.kernel_sigma,
        noise: a.noise.into(),
        shared_across_slices: a.shared.0,
    };
    let input = a.input.as_ref().map(read_volume).transpose()?;
    let dims = input.as_ref().map_or(a.dims.0, Volume3D::dims);
    let t = sample_field(dims, &params, a.seed)?;
    mkdir(&a.out)?;
    let as_volume = |d: &[f64]| Volume3D::from_data(dims, d.iter().map(|&x| x as f32).collect(), VolumeKind::Intensity);
    let mut out = Vec::new();
    for (name, d) in [("dx", t.dx()), ("dy", t.dy())] {
        let v = as_volume(d)?;
        out.push(match a.format {
            FieldFormat::Nifti => save(&v, &a.out.join(format!("{name}.nii")), name)?,
            FieldFormat::Raw => {
                let p = a.out.join(format!("{name}.raw"));
                write_raw(&v, &p)?;
                p
            }
        });
    }
    let mag: Vec<f64> = t.dx().iter().zip(t.dy()).map(|(x, y)| x.hypot(*y)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    log::info!("displacement up to {max:.2} voxels");
    if let Some(v) = input {
        let w = warp(&v, &t)?;
        out.push(save(&w, &a.out.join("warped.nii"), "warped")?);
        let axis: Axis = a.axis.into();
        for (name, vol) in [("input.png", &v), ("warped.png", &w)] {
            let png = a.out.join(name);
            write_auto_png(&mip(vol, axis), &png)?;
            out.push(png);
        }
    }
    Ok(out)
}

pub fn frangi(a: &FrangiArgs) -> Outcome {
    let params = VesselnessParams { scales: a.scales.0.clone(), alpha: a.alpha, beta: a.beta, c: a.c, threshold: a.threshold };
    let inputs = volume_paths(&a.input)?;
    let dirs = ["responses", "masks", "mips"].map(|d| a.out.join(d));
    for d in &dirs {
        mkdir(d)?;
    }
    let mut out = Vec::new();
    for path in inputs {
        let id = stem(&path);
        let (response, mask) = frangi_multiscale(&read_volume(&path)?, &params)?;
        out.push(save(&response, &dirs[0].join(format!("{id}.nii")), &id)?);
        out.push(save(&mask, &dirs[1].join(format!("{id}.nii")), &id)?);
        let png = dirs[2].join(format!("{id}.png"));
        write_auto_png(&mip(&response, a.axis.into()), &png)?;
        out.push(png);
        let voxels = mask.data().iter().filter(|&&m| m > 0.5).count();
        log::info!("{id}: {voxels} voxels above threshold");
    }
    Ok(out)
}

pub fn mip_cmd(a: &MipArgs) -> Outcome {
    let v = read_volume(&a.input)?;
    let axis: Axis = a.axis.into();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    match &a.overlay {
        Some(mask) => {
            if a.window.is_some() {
                log::warn!("--window is ignored with --overlay");
            }
            write_rgb_png(&overlay_mask(&v, &read_volume(mask)?, axis, OVERLAY_COLOR)?, &a.out)?;
        }
        None => {
            let img = mip(&v, axis);
            match a.window {
                Some(w) => write_mip_png(&img, &a.out, (w.0, w.1))?,
                None => write_auto_png(&img, &a.out)?,
            }
        }
    }
    Ok(vec![a.out.clone()])
}
