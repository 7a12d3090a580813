//! Acceptance checks, one PASS/FAIL line each.
//!
//! Run all: `cargo test --test acceptance`. Run a subset by number:
//! `cargo test --test acceptance -- 2 5`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vseg_core::autodiff::{grad_check, GradCheckReport, Graph, NodeId, Tensor};
use vseg_core::checkpoint::Checkpoint;
use vseg_core::deformation::{sample_field, warp, DeformationField, DeformationParams, NoiseKind};
use vseg_core::frangi::{frangi_multiscale, hessian_of, vesselness, vesselness_of, VesselnessParams};
use vseg_core::losses::{
    consistency_loss, consistency_node, focal_tversky_node, mss_aggregate, mss_loss_node, supervised_loss_node, total_loss_node,
    ConsistencyCriterion, ConsistencyKind, FocalTverskyParams, MssWeights,
};
use vseg_core::metrics::{overlap_of, OverlapMetrics};
use vseg_core::optim::AdamParams;
use vseg_core::patches::{extract_grid, reassemble, LabeledVolume, PatchSpec};
use vseg_core::phantom::{generate, make_dataset, render, PhantomConfig, Split, Tube};
use vseg_core::rng;
use vseg_core::trainer::{predict_volume, LogRecord, TrainRunConfig, Trainer};
use vseg_core::unet::{forward_graph, NetworkConfig, Normalization, Parameters};
use vseg_core::volume::{read_nifti, read_nifti_with_info, write_nifti, NiftiDatatype, Volume3D, VolumeHeaderInfo, VolumeKind};

const GRAD_H: f64 = 1e-5;
const DIRECTIONS: usize = 3;
const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng_for(tag: &str) -> ChaCha8Rng {
    rng::stream(20_240_601, tag)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from 0 so ReLU and max-pool kinks stay outside ±h.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn binary_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if r.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Weighted sum so every output element carries a distinct cotangent.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> vseg_core::Result<NodeId> {
    let mut r = rng::stream(seed, "projection");
    let w = random_tensor(&mut r, g.value(out).shape(), -1.0, 1.0);
    let wn = g.constant(w);
    let p = g.mul(out, wn)?;
    g.sum(p)
}

struct GradLog {
    worst: f64,
    failures: Vec<String>,
    checks: usize,
    coords: usize,
    skipped: usize,
}

impl GradLog {
    fn check<F>(&mut self, name: &str, f: F, x: &Tensor<f64>)
    where
        F: Fn(&mut Graph<f64>, NodeId) -> vseg_core::Result<NodeId>,
    {
        if let Some(r) = self.run(name, f, x) {
            if !r.pass {
                self.failures.push(format!("{name}: rel {:.2e} (analytic {}, numeric {})", r.max_rel_err, r.analytic, r.numeric));
            }
        }
    }

    /// Like `check`, but a stencil that crosses a kink everywhere is not a
    /// failure by itself; returns whether anything was compared.
    fn check_skippable<F>(&mut self, name: &str, f: F, x: &Tensor<f64>) -> bool
    where
        F: Fn(&mut Graph<f64>, NodeId) -> vseg_core::Result<NodeId>,
    {
        match self.run(name, f, x) {
            Some(r) if r.checked == 0 => false,
            Some(r) => {
                if !r.pass {
                    self.failures.push(format!("{name}: rel {:.2e} (analytic {}, numeric {})", r.max_rel_err, r.analytic, r.numeric));
                }
                true
            }
            None => true,
        }
    }

    fn run<F>(&mut self, name: &str, f: F, x: &Tensor<f64>) -> Option<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, NodeId) -> vseg_core::Result<NodeId>,
    {
        self.checks += 1;
        match grad_check(f, x, GRAD_H, GRAD_TOL) {
            Ok(r) => {
                self.worst = self.worst.max(r.max_rel_err);
                self.coords += r.checked;
                self.skipped += r.skipped;
                Some(r)
            }
            Err(e) => {
                self.failures.push(format!("{name}: {e}"));
                None
            }
        }
    }
}

fn primitive_checks(log: &mut GradLog) {
    let mut r = rng_for("primitives");
    for trial in 0..3u64 {
        let b = r.random_range(1..=2);
        let ci = r.random_range(1..=2);
        let co = r.random_range(1..=2);
        let s = [r.random_range(2..=4) * 2, r.random_range(1..=2) * 2, r.random_range(1..=3) * 2];
        let shape = [b, ci, s[0], s[1], s[2]];
        let x = away_from_zero(&mut r, &shape);
        let w = random_tensor(&mut r, &[co, ci, 3, 3, 3], -0.5, 0.5);
        let bias = random_tensor(&mut r, &[co], -0.5, 0.5);
        let seed = trial;

        {
            let (w, bias) = (w.clone(), bias.clone());
            log.check(
                "conv3d/x",
                move |g, x| {
                    let (wn, bn) = (g.constant(w.clone()), g.constant(bias.clone()));
                    let o = g.conv3d(x, wn, bn, 1, 1)?;
                    project(g, o, seed)
                },
                &x,
            );
        }
        {
            let (xc, bias) = (x.clone(), bias.clone());
            log.check(
                "conv3d/w",
                move |g, w| {
                    let (xn, bn) = (g.constant(xc.clone()), g.constant(bias.clone()));
                    let o = g.conv3d(xn, w, bn, 1, 1)?;
                    project(g, o, seed)
                },
                &w,
            );
        }
        {
            let (xc, w) = (x.clone(), w.clone());
            log.check(
                "conv3d/b",
                move |g, bn| {
                    let (xn, wn) = (g.constant(xc.clone()), g.constant(w.clone()));
                    let o = g.conv3d(xn, wn, bn, 1, 1)?;
                    project(g, o, seed)
                },
                &bias,
            );
        }
        let w1 = random_tensor(&mut r, &[co, ci, 1, 1, 1], -1.0, 1.0);
        log.check(
            "conv3d/1x1",
            move |g, x| {
                let (wn, bn) = (g.constant(w1.clone()), g.constant(Tensor::zeros(&[co])));
                let o = g.conv3d(x, wn, bn, 0, 1)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "max-pool3d",
            move |g, x| {
                let o = g.max_pool3d(x)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "upsample2x",
            move |g, x| {
                let o = g.upsample2x(x)?;
                project(g, o, seed)
            },
            &x,
        );
        let to = [s[0] * 2 + 1, s[1] + 3, s[2] * 2];
        log.check(
            "upsample-to",
            move |g, x| {
                let o = g.upsample_to(x, to)?;
                project(g, o, seed)
            },
            &x,
        );
        for axis in [0usize, 1] {
            let other = random_tensor(&mut r, &shape, -1.0, 1.0);
            log.check(
                "concat",
                move |g, x| {
                    let on = g.constant(other.clone());
                    let o = g.concat(&[on, x], axis)?;
                    project(g, o, seed)
                },
                &x,
            );
            let len = shape[axis];
            log.check(
                "slice",
                move |g, x| {
                    let o = g.slice(x, axis, len - 1, 1)?;
                    project(g, o, seed)
                },
                &x,
            );
        }
        log.check(
            "relu",
            move |g, x| {
                let o = g.relu(x)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "sigmoid",
            move |g, x| {
                let o = g.sigmoid(x)?;
                project(g, o, seed)
            },
            &x,
        );
        let other = random_tensor(&mut r, &shape, 0.5, 1.5);
        for op in ["add", "sub", "mul", "div"] {
            let other = other.clone();
            log.check(
                op,
                move |g, x| {
                    let on = g.constant(other.clone());
                    let o = match op {
                        "add" => g.add(x, on)?,
                        "sub" => g.sub(on, x)?,
                        "mul" => g.mul(x, on)?,
                        _ => g.div(x, on)?,
                    };
                    project(g, o, seed)
                },
                &x,
            );
        }
        let sh = shape.to_vec();
        log.check(
            "div/denominator",
            move |g, d| {
                let n = g.constant(Tensor::full(&sh, 0.7));
                let o = g.div(n, d)?;
                project(g, o, seed)
            },
            &other,
        );
        let scalar = Tensor::scalar(1.7);
        log.check(
            "mul/scalar-broadcast",
            move |g, x| {
                let s = g.constant(scalar.clone());
                let o = g.mul(x, s)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "mul/scalar-operand",
            {
                let xc = x.clone();
                move |g, s| {
                    let xn = g.constant(xc.clone());
                    let o = g.mul(xn, s)?;
                    project(g, o, seed)
                }
            },
            &Tensor::scalar(0.9),
        );
        log.check(
            "add-scalar",
            move |g, x| {
                let o = g.add_scalar(x, 0.3)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "mul-scalar",
            move |g, x| {
                let o = g.mul_scalar(x, -2.5)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "pow/2",
            move |g, x| {
                let o = g.pow(x, 2.0)?;
                project(g, o, seed)
            },
            &x,
        );
        log.check(
            "pow/0.75",
            move |g, x| {
                let o = g.pow(x, 0.75)?;
                project(g, o, seed)
            },
            &other,
        );
        log.check("sum", |g, x| g.sum(x), &x);
        log.check(
            "mean",
            |g, x| {
                let s = g.mul(x, x)?;
                g.mean(s)
            },
            &x,
        );
        log.check(
            "batch-sum",
            move |g, x| {
                let o = g.batch_sum(x)?;
                project(g, o, seed)
            },
            &x,
        );
        let n = x.len();
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let idx = Arc::new(idx);
        log.check(
            "gather",
            move |g, x| {
                let o = g.gather(x, idx.clone(), shape.to_vec())?;
                project(g, o, seed)
            },
            &x,
        );
        let gamma = random_tensor(&mut r, &[ci], 0.5, 1.5);
        let beta = random_tensor(&mut r, &[ci], -0.5, 0.5);
        {
            let (gm, bt) = (gamma.clone(), beta.clone());
            log.check(
                "batch-norm/x",
                move |g, x| {
                    let (a, c) = (g.constant(gm.clone()), g.constant(bt.clone()));
                    let o = g.batch_norm(x, a, c, 1e-5)?;
                    project(g, o, seed)
                },
                &x,
            );
        }
        {
            let (xc, bt) = (x.clone(), beta.clone());
            log.check(
                "batch-norm/gamma",
                move |g, gm| {
                    let (xn, c) = (g.constant(xc.clone()), g.constant(bt.clone()));
                    let o = g.batch_norm(xn, gm, c, 1e-5)?;
                    project(g, o, seed)
                },
                &gamma,
            );
        }
        {
            let (xc, gm) = (x.clone(), gamma.clone());
            log.check(
                "batch-norm/beta",
                move |g, bt| {
                    let (xn, a) = (g.constant(xc.clone()), g.constant(gm.clone()));
                    let o = g.batch_norm(xn, a, bt, 1e-5)?;
                    project(g, o, seed)
                },
                &beta,
            );
        }
        {
            let (gm, bt) = (gamma.clone(), beta.clone());
            log.check(
                "channel-affine/x",
                move |g, x| {
                    let (a, c) = (g.constant(gm.clone()), g.constant(bt.clone()));
                    let o = g.channel_affine(x, a, c)?;
                    project(g, o, seed)
                },
                &x,
            );
        }
        {
            let (xc, bt) = (x.clone(), beta.clone());
            log.check(
                "channel-affine/scale",
                move |g, gm| {
                    let (xn, c) = (g.constant(xc.clone()), g.constant(bt.clone()));
                    let o = g.channel_affine(xn, gm, c)?;
                    project(g, o, seed)
                },
                &gamma,
            );
        }
        {
            let (xc, gm) = (x.clone(), gamma.clone());
            log.check(
                "channel-affine/shift",
                move |g, bt| {
                    let (xn, a) = (g.constant(xc.clone()), g.constant(gm.clone()));
                    let o = g.channel_affine(xn, a, bt)?;
                    project(g, o, seed)
                },
                &beta,
            );
        }
    }
}

fn loss_checks(log: &mut GradLog) {
    let mut r = rng_for("losses");
    let ft = FocalTverskyParams::default();
    let shape = [2, 1, 4, 4, 3];
    let logits = random_tensor(&mut r, &shape, -2.0, 2.0);
    let y = binary_tensor(&mut r, &shape);
    {
        let y = y.clone();
        log.check(
            "focal-tversky",
            move |g, l| {
                let p = g.sigmoid(l)?;
                let yn = g.constant(y.clone());
                let v = focal_tversky_node(g, p, yn, &ft)?;
                project(g, v, 1)
            },
            &logits,
        );
    }
    let w = MssWeights::default_for(3);
    let extra: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut r, &shape, -2.0, 2.0)).collect();
    let mss = {
        let (y, w, extra) = (y.clone(), w.clone(), extra.clone());
        move |g: &mut Graph<f64>, l: NodeId| -> vseg_core::Result<NodeId> {
            let mut outs = vec![g.sigmoid(l)?];
            for e in &extra {
                let en = g.constant(e.clone());
                let s = g.add(l, en)?;
                outs.push(g.sigmoid(s)?);
            }
            let yn = g.constant(y.clone());
            Ok(mss_loss_node(g, &outs, yn, &w, &ft)?.0)
        }
    };
    {
        let mss = mss.clone();
        log.check(
            "multi-scale loss",
            move |g, l| {
                let v = mss(g, l)?;
                project(g, v, 2)
            },
            &logits,
        );
    }
    let logits2 = random_tensor(&mut r, &shape, -2.0, 2.0);
    {
        let (mss, l2) = (mss.clone(), logits2.clone());
        log.check(
            "supervised loss",
            move |g, l| {
                let b1 = mss(g, l)?;
                let l2n = g.constant(l2.clone());
                let b2 = mss(g, l2n)?;
                supervised_loss_node(g, b1, Some(b2))
            },
            &logits,
        );
    }
    let field = sample_field([4, 4, 3], &DeformationParams { kernel_size: 3, kernel_sigma: 1.0, ..Default::default() }, 11).unwrap();
    for kind in [ConsistencyKind::MeanSquared, ConsistencyKind::FocalTverskySoft] {
        let crit = ConsistencyCriterion { kind, weight: 0.7 };
        for branch in 0..2 {
            let (f, other) = (field.clone(), logits2.clone());
            log.check(
                &format!("consistency/{kind:?}/branch{}", branch + 1),
                move |g, l| {
                    let p = g.sigmoid(l)?;
                    let on = g.constant(other.clone());
                    let q = g.sigmoid(on)?;
                    let (a, b) = if branch == 0 { (p, q) } else { (q, p) };
                    consistency_node(g, a, b, &f, &crit)
                },
                &logits,
            );
        }
        let (mss, f, l2) = (mss.clone(), field.clone(), logits2.clone());
        log.check(
            &format!("total objective/{kind:?}"),
            move |g, l| {
                let b1 = mss(g, l)?;
                let l2n = g.constant(l2.clone());
                let b2 = mss(g, l2n)?;
                let sup = supervised_loss_node(g, b1, Some(b2))?;
                let p1 = g.sigmoid(l)?;
                let p2 = g.sigmoid(l2n)?;
                let cons = consistency_node(g, p1, p2, &f, &crit)?;
                total_loss_node(g, sup, Some(cons), &crit)
            },
            &logits,
        );
    }
}

// Elementwise against the input; per parameter tensor along random
// directions, i.e. d/dt L(θ + t·d) at t = 0. Individual weight
// gradients of a random net reach 1e-9, below what h = 1e-5 differences
// can resolve in f64.
fn unet_checks(log: &mut GradLog) {
    let mut r = rng_for("unet");
    let net = NetworkConfig { depth: 4, base_channels: 2, supervision_scales: 3, normalization: Normalization::None, ..Default::default() };
    let mut params = Parameters::<f64>::build(&net, 3).unwrap();
    // zero biases leave exact ReLU ties wherever a receptive field is dead
    let names = params.names().to_vec();
    for (n, t) in names.iter().zip(params.tensors_mut()) {
        if n.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.1..0.1));
        }
    }
    let x = away_from_zero(&mut r, &[1, 1, 8, 8, 8]);
    let y = binary_tensor(&mut r, &[1, 1, 8, 8, 8]);
    let w = MssWeights::default_for(3);
    let ft = FocalTverskyParams::default();
    let tensors = params.tensors().to_vec();
    let objective = move |g: &mut Graph<f64>, subst: Option<(usize, NodeId)>, x: NodeId| -> vseg_core::Result<NodeId> {
        let nodes: Vec<NodeId> = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| match subst {
                Some((j, n)) if j == i => n,
                _ => g.constant(t.clone()),
            })
            .collect();
        let outs = forward_graph(g, &net, &nodes, x)?;
        let yn = g.constant(y.clone());
        let (agg, _) = mss_loss_node(g, &outs, yn, &w, &ft)?;
        g.sum(agg)
    };
    {
        let f = objective.clone();
        log.check("u-net/input", move |g, x| f(g, None, x), &x);
    }
    let t0 = Tensor::new(vec![1], vec![0.0]).unwrap();
    for (i, (name, theta)) in params.names().iter().zip(params.tensors()).enumerate() {
        let mut compared = 0;
        for k in 0..DIRECTIONS {
            let d = away_from_zero(&mut r, theta.shape());
            let (f, xc, theta) = (objective.clone(), x.clone(), theta.clone());
            let along = move |g: &mut Graph<f64>, t: NodeId| {
                let (base, dn) = (g.constant(theta.clone()), g.constant(d.clone()));
                let step = g.mul(dn, t)?;
                let p = g.add(base, step)?;
                let xn = g.constant(xc.clone());
                f(g, Some((i, p)), xn)
            };
            compared += usize::from(log.check_skippable(&format!("u-net/{name}/dir{k}"), along, &t0));
        }
        if compared == 0 {
            log.failures.push(format!("u-net/{name}: every direction crosses a kink"));
        }
    }
}

fn criterion_1() -> Outcome {
    let mut log = GradLog { worst: 0.0, failures: Vec::new(), checks: 0, coords: 0, skipped: 0 };
    primitive_checks(&mut log);
    loss_checks(&mut log);
    unet_checks(&mut log);
    let pass = log.failures.is_empty();
    let mut d = format!(
        "{} gradient checks over {} coordinates ({} skipped at kinks), worst rel err {:.2e} (tol {GRAD_TOL:e}, h {GRAD_H:e})",
        log.checks, log.coords, log.skipped, log.worst
    );
    for f in log.failures.iter().take(if std::env::var_os("VSEG_VERBOSE").is_some() { usize::MAX } else { 5 }) {
        d.push_str(&format!("; {f}"));
    }
    outcome(pass, d)
}

fn brute_counts(p: &[f32], q: &[f32]) -> (u64, u64, u64) {
    let a: Vec<usize> = (0..p.len()).filter(|&i| p[i] >= 0.5).collect();
    let b: Vec<usize> = (0..q.len()).filter(|&i| q[i] >= 0.5).collect();
    let inter = a.iter().filter(|i| b.contains(i)).count() as u64;
    (inter, a.len() as u64 - inter, b.len() as u64 - inter)
}

fn criterion_2() -> Outcome {
    let mask = |bits: u32| -> Vec<f32> { (0..8).map(|i| ((bits >> i) & 1) as f32).collect() };
    let mut bad = 0u64;
    for pb in 0..256u32 {
        for rb in 0..256u32 {
            let (p, q) = (mask(pb), mask(rb));
            let m = overlap_of(&p, &q);
            let (tp, fp, fn_) = brute_counts(&p, &q);
            let union = tp + fp + fn_;
            let (dice, iou) =
                if union == 0 { (1.0, 1.0) } else { (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / union as f64) };
            if (m.tp, m.fp, m.fn_) != (tp, fp, fn_) || m.dice != dice || m.iou != iou {
                bad += 1;
            }
        }
    }
    let mut r = rng_for("metrics");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..2000);
        let (pf, rf) = (r.random::<f64>(), r.random::<f64>());
        let p: Vec<f32> = (0..n).map(|_| if r.random::<f64>() < pf { 1.0 } else { 0.0 }).collect();
        let q: Vec<f32> = (0..n).map(|_| if r.random::<f64>() < rf { 1.0 } else { 0.0 }).collect();
        let OverlapMetrics { dice, iou, .. } = overlap_of(&p, &q);
        worst = worst.max((iou - dice / (2.0 - dice)).abs());
    }
    outcome(bad == 0 && worst <= 1e-12, format!("65536 pairs, {bad} mismatches; identity max err {worst:.1e} (tol 1e-12)"))
}

fn criterion_3() -> Outcome {
    let mut r = rng_for("equivariance");
    let mut nonzero = 0;
    for k in 0..100u64 {
        let dims = [r.random_range(4..12), r.random_range(4..12), r.random_range(1..5)];
        let params = DeformationParams {
            scale_range: (0.0, r.random_range(0.5..6.0)),
            kernel_size: 2 * r.random_range(0..5) + 1,
            kernel_sigma: r.random_range(0.5..50.0),
            noise: if k % 2 == 0 { NoiseKind::Uniform } else { NoiseKind::Gaussian },
            shared_across_slices: k % 3 == 0,
        };
        let t = sample_field(dims, &params, k).unwrap();
        let n: usize = dims.iter().product();
        let x = Volume3D::from_data(dims, (0..n).map(|_| r.random_range(-3.0..3.0)).collect(), VolumeKind::Intensity).unwrap();
        // pointwise network: per-voxel affine map followed by a sigmoid
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
        let net = |v: &Volume3D| -> Tensor<f64> {
            let [nx, ny, nz] = v.dims();
            Tensor::new(vec![1, 1, nx, ny, nz], v.data().iter().map(|&x| 1.0 / (1.0 + (-(a * f64::from(x) + b)).exp())).collect()).unwrap()
        };
        let y1 = net(&x);
        let y2 = net(&warp(&x, &t).unwrap());
        let l = consistency_loss(&y1, &y2, &t, &ConsistencyCriterion { kind: ConsistencyKind::MeanSquared, weight: 1.0 }).unwrap();
        if l != 0.0 {
            nonzero += 1;
        }
    }
    let mut identical = true;
    for _ in 0..20 {
        let dims = [r.random_range(1..10), r.random_range(1..10), r.random_range(1..6)];
        let n: usize = dims.iter().product();
        let v = Volume3D::from_data(dims, (0..n).map(|_| r.random::<f32>() * 1e6 - 5e5).collect(), VolumeKind::Intensity).unwrap();
        let w = warp(&v, &DeformationField::zeros(dims)).unwrap();
        identical &= v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(
        nonzero == 0 && identical,
        format!("100 fields, {nonzero} non-zero consistency losses; zero-field warp bit-identical: {identical}"),
    )
}

fn criterion_4() -> Outcome {
    let mut r = rng_for("mss");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = r.random_range(1..6);
        let alphas: Vec<f64> = (0..m).map(|_| r.random_range(0.05..2.0)).collect();
        let losses: Vec<f64> = (0..m).map(|_| r.random::<f64>()).collect();
        let base = mss_aggregate(&losses, &MssWeights::new(alphas.clone()).unwrap()).unwrap().total;
        for k in [0.1, 3.0, 1000.0] {
            let scaled = MssWeights::new(alphas.iter().map(|a| a * k).collect()).unwrap();
            worst = worst.max((mss_aggregate(&losses, &scaled).unwrap().total - base).abs());
        }
    }
    outcome(worst < 1e-12, format!("max |ΔL| {worst:.1e} over 100 breakdowns × k ∈ {{0.1, 3, 1000}} (tol 1e-12)"))
}

fn criterion_5() -> Outcome {
    let spec = PatchSpec::new([64; 3], [32, 32, 16]).unwrap();
    let mut r = rng_for("pipeline");
    let mut ok = true;
    let mut windows = 0;
    for dims in [[100, 96, 70], [64, 64, 64], [65, 97, 80], [130, 64, 66]] {
        let n: usize = dims.iter().product();
        let v = Volume3D::from_data(dims, (0..n).map(|_| r.random::<f32>() * 200.0 - 100.0).collect(), VolumeKind::Intensity).unwrap();
        let grid = extract_grid(dims, &spec).unwrap();
        windows += grid.len();
        let preds: Vec<Vec<f32>> = grid.windows().map(|o| v.crop(o, spec.patch_size).unwrap().into_data()).collect();
        let back = reassemble(&grid, &preds, VolumeKind::Intensity).unwrap();
        ok &= back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(ok, format!("4 volumes incl. 100×96×70, {windows} windows, bit-exact: {ok}"))
}

fn dice(pred: &Volume3D, label: &Volume3D) -> f64 {
    overlap_of(pred.data(), label.data()).dice
}

fn criterion_6() -> Outcome {
    let p = generate(&PhantomConfig { dims: [32; 3], ..Default::default() }, 1).unwrap();
    let set = vec![LabeledVolume { image: p.image.clone(), label: p.clean.clone() }];
    let net = NetworkConfig { depth: 4, base_channels: 8, supervision_scales: 3, ..Default::default() };
    let spec = PatchSpec::new([16; 3], [8; 3]).unwrap();
    let cfg = TrainRunConfig {
        epochs: 20,
        batch_size: 4,
        patches_per_epoch: 40,
        seed: 1,
        patch: spec,
        adam: AdamParams { lr: 3e-3, ..Default::default() },
        ..Default::default()
    };
    let batches = cfg.epochs * cfg.patches_per_epoch / cfg.batch_size;
    let mut t = Trainer::<f32>::new(&net, cfg).unwrap();
    let summaries = t.fit(&set, &[], &mut |_| {}).unwrap();
    let (_, mask) = predict_volume(&t.params, &p.image, &spec, 0.5).unwrap();
    let d = dice(&mask, &p.clean);
    let (first, last) = (summaries[0].total, summaries[summaries.len() - 1].total);
    outcome(
        d > 0.95 && last < first,
        format!("{batches} batches of 4 16³ patches, base 8, MSS+consistency: Dice {d:.4} (need > 0.95); loss {first:.3} → {last:.3}"),
    )
}

struct TableRun {
    proposed: f64,
    unet: f64,
    frangi: f64,
}

const TABLE_DIMS: usize = 48;
const TABLE_BASE: usize = 4;
const TABLE_EPOCHS: usize = 10;
const TABLE_PATCHES: usize = 40;
const TABLE_LR: f64 = 3e-3;

fn table_run(seed: u64) -> TableRun {
    let pcfg = PhantomConfig { dims: [TABLE_DIMS; 3], gap_probability: 0.15, ..Default::default() };
    let ds = make_dataset(11, &pcfg, seed).unwrap();
    let set = |s: Split, noisy: bool| -> Vec<LabeledVolume> {
        ds.split(s)
            .map(|e| LabeledVolume {
                image: e.phantom.image.clone(),
                label: if noisy { e.phantom.corrupted.clone() } else { e.phantom.clean.clone() },
            })
            .collect()
    };
    let (train, val, test) = (set(Split::Train, true), set(Split::Val, true), set(Split::Test, false));
    let spec = PatchSpec::new([32; 3], [16; 3]).unwrap();
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let frangi = mean(test.iter().map(|v| dice(&frangi_multiscale(&v.image, &VesselnessParams::default()).unwrap().1, &v.label)).collect());
    let run = |m: usize, siamese: bool| -> f64 {
        let net = NetworkConfig { depth: 4, base_channels: TABLE_BASE, supervision_scales: m, ..Default::default() };
        let cfg = TrainRunConfig {
            epochs: TABLE_EPOCHS,
            batch_size: 4,
            patches_per_epoch: TABLE_PATCHES,
            seed,
            patch: spec,
            consistency: siamese,
            branch2_supervision: siamese,
            adam: AdamParams { lr: TABLE_LR, ..Default::default() },
            ..Default::default()
        };
        let mut t = Trainer::<f32>::new(&net, cfg).unwrap();
        t.fit(&train, &val, &mut |_| {}).unwrap();
        let best = t.best_or_current();
        mean(test.iter().map(|v| dice(&predict_volume(best, &v.image, &spec, 0.5).unwrap().1, &v.label)).collect())
    };
    let proposed = run(3, true);
    let unet = run(1, false);
    TableRun { proposed, unet, frangi }
}

fn criterion_7() -> Outcome {
    let runs: Vec<TableRun> = [1u64, 2, 3].iter().map(|&s| table_run(s)).collect();
    let mean = |f: fn(&TableRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (p, u, f) = (mean(|r| r.proposed), mean(|r| r.unet), mean(|r| r.frangi));
    let per: Vec<String> = runs.iter().map(|r| format!("({:.3}, {:.3}, {:.3})", r.proposed, r.unet, r.frangi)).collect();
    let pass = p - u > 0.005 && p - f >= 0.15 && u - f >= 0.15;
    outcome(
        pass,
        format!(
            "3-seed mean test Dice: proposed {p:.4}, U-Net {u:.4}, Frangi {f:.4} (need proposed > U-Net + 0.005, both ≥ Frangi + 0.15); per seed {}; {TABLE_DIMS}³ phantoms, base {TABLE_BASE}, {TABLE_EPOCHS} epochs × {TABLE_PATCHES} 32³ patches",
            per.join(" ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let dims = [32; 3];
    let cfg = PhantomConfig { dims, ..Default::default() };
    let tube = Tube::straight([16.0, 16.0, -2.0], [16.0, 16.0, 34.0], 1.5);
    let ph = render(&cfg, &[tube], &mut rng_for("tube")).unwrap();
    let (v, _) = frangi_multiscale(&ph.image, &VesselnessParams::default()).unwrap();
    let (mut center, mut bg) = (Vec::new(), Vec::new());
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let value = f64::from(v.get(x, y, z));
                if x == 16 && y == 16 {
                    center.push(value);
                } else if ph.clean.get(x, y, z) == 0.0 {
                    bg.push(value);
                }
            }
        }
    }
    let mc = center.iter().sum::<f64>() / center.len() as f64;
    let mb = bg.iter().sum::<f64>() / bg.len() as f64;
    let ratio_ok = mc >= 10.0 * mb;

    let mut r = rng_for("frangi");
    let mut suppressed = true;
    for _ in 0..10_000 {
        let mut l = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
        l.sort_by(|a: &f64, b| a.abs().total_cmp(&b.abs()));
        if l[1] > 0.0 {
            suppressed &= vesselness(l, 0.5, 0.5, r.random_range(0.1..10.0)) == 0.0;
        }
    }
    let small = [20, 18, 16];
    let n: usize = small.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let p = VesselnessParams::default();
    let mut shift_err = 0.0f64;
    for c in [7.0, -3.25, 100.0] {
        let shifted: Vec<f64> = data.iter().map(|x| x + c).collect();
        for &s in &p.scales {
            let (a, _) = vesselness_of(&hessian_of(&data, small, s).unwrap(), &p);
            let (b, _) = vesselness_of(&hessian_of(&shifted, small, s).unwrap(), &p);
            shift_err = shift_err.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    outcome(
        ratio_ok && suppressed && shift_err <= 1e-10,
        format!("centerline/background {mc:.4}/{mb:.2e} = {:.0}× (need ≥ 10); λ₂ > 0 suppressed: {suppressed}; shift error {shift_err:.1e} (tol 1e-10)", mc / mb.max(1e-300)),
    )
}

fn strip_time(log: &[LogRecord]) -> Vec<LogRecord> {
    log.iter().map(|r| LogRecord { wall_time: 0.0, ..r.clone() }).collect()
}

fn criterion_9() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let pc = PhantomConfig { dims: [16; 3], vessel_count: (2, 3), gap_probability: 0.15, ..Default::default() };
        let ds = make_dataset(3, &pc, 4).unwrap();
        let train: Vec<LabeledVolume> =
            ds.entries.iter().map(|e| LabeledVolume { image: e.phantom.image.clone(), label: e.phantom.corrupted.clone() }).collect();
        let val = &train[..1];
        let net = NetworkConfig { depth: 3, base_channels: 2, supervision_scales: 2, ..Default::default() };
        let cfg = TrainRunConfig {
            epochs: 3,
            batch_size: 2,
            patches_per_epoch: 6,
            seed: 8,
            patch: PatchSpec::new([8; 3], [4; 3]).unwrap(),
            adam: AdamParams { lr: 1e-2, ..Default::default() },
            deformation: DeformationParams { kernel_size: 5, kernel_sigma: 2.0, ..Default::default() },
            ..Default::default()
        };
        let full = |dir: &Path| -> (Vec<LogRecord>, Vec<u8>) {
            let mut t = Trainer::<f64>::new(&net, cfg.clone()).unwrap().with_output(dir).unwrap();
            let mut log = Vec::new();
            t.fit(&train, val, &mut |r| log.push(r.clone())).unwrap();
            (log, t.checkpoint().to_bytes().unwrap())
        };
        let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let (la, ca) = full(dirs[0].path());
        let (lb, cb) = full(dirs[1].path());
        let files_equal = ["last.ckpt", "best.ckpt"]
            .iter()
            .all(|f| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap());
        let repeat = strip_time(&la) == strip_time(&lb) && ca == cb && files_equal;

        let mut t = Trainer::<f64>::new(&net, TrainRunConfig { epochs: 3, ..cfg.clone() }).unwrap().with_output(dirs[2].path()).unwrap();
        let mut log = Vec::new();
        t.run_epoch(&train, val, &mut |r| log.push(r.clone())).unwrap();
        drop(t);
        let ck = Checkpoint::<f64>::load(dirs[2].path().join("last.ckpt")).unwrap();
        let mut resumed = Trainer::resume(ck, cfg.clone()).unwrap().with_output(dirs[2].path()).unwrap();
        resumed.fit(&train, val, &mut |r| log.push(r.clone())).unwrap();
        let resume = strip_time(&log) == strip_time(&la) && resumed.checkpoint().to_bytes().unwrap() == ca;
        outcome(repeat && resume, format!("--threads 1, f64: repeated runs identical: {repeat}; resume after epoch 1 identical: {resume}"))
    })
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nifti")
}

/// The five volumes this crate writes for the cross-reader check.
fn written_fixtures() -> Vec<(&'static str, Volume3D, NiftiDatatype)> {
    let mut r = rng_for("nifti");
    let mask = Volume3D::from_fn([5, 4, 3], VolumeKind::BinaryMask, |x, y, z| ((x + y + z) % 2) as f32).unwrap();
    let ramp = Volume3D::from_fn([4, 3, 2], VolumeKind::Intensity, |x, y, z| (x + 4 * (y + 3 * z)) as f32 - 12.0).unwrap();
    let noise = Volume3D::from_fn([7, 6, 5], VolumeKind::Intensity, |_, _, _| r.random_range(-1000.0..1000.0)).unwrap();
    let prob = Volume3D::from_fn([3, 3, 3], VolumeKind::Probability, |x, y, z| (x + 3 * (y + 3 * z)) as f32 / 26.0).unwrap();
    let aniso = Volume3D::new([6, 5, 4], [0.3, 0.5, 1.25], (0..120).map(|_| r.random::<f32>()).collect(), VolumeKind::Intensity).unwrap();
    vec![
        ("ours_uint8_mask.nii", mask, NiftiDatatype::Uint8),
        ("ours_int16_ramp.nii", ramp, NiftiDatatype::Int16),
        ("ours_float32_noise.nii", noise, NiftiDatatype::Float32),
        ("ours_float32_prob.nii", prob, NiftiDatatype::Float32),
        ("ours_float32_aniso.nii", aniso, NiftiDatatype::Float32),
    ]
}

#[derive(serde::Deserialize)]
struct Readback {
    dims: Vec<usize>,
    zooms: Vec<f64>,
    values: Vec<f64>,
}

fn matches_readback(v: &Volume3D, rb: &Readback) -> bool {
    rb.dims == v.dims()
        // pixdim is stored as float32
        && rb.zooms.iter().zip(v.spacing()).all(|(a, b)| *a as f32 == b)
        && rb.values.len() == v.len()
        && rb.values.iter().zip(v.data()).all(|(a, b)| *a == f64::from(*b))
}

fn live_nibabel(dir: &Path) -> Option<BTreeMap<String, Readback>> {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/nifti_crosscheck.py");
    let out = Command::new("python3").arg(script).arg("read").arg(dir).output().ok()?;
    if !out.status.success() {
        return None;
    }
    serde_json::from_slice(&out.stdout).ok()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng_for("roundtrip");
    let mut roundtrip = true;
    let cases = [
        (
            Volume3D::from_fn([9, 7, 5], VolumeKind::BinaryMask, |_, _, _| if r.random::<bool>() { 1.0 } else { 0.0 }).unwrap(),
            NiftiDatatype::Uint8,
        ),
        (
            Volume3D::from_fn([9, 7, 5], VolumeKind::Intensity, |_, _, _| r.random_range(-32768..=32767) as f32).unwrap(),
            NiftiDatatype::Int16,
        ),
        (
            Volume3D::from_fn([9, 7, 5], VolumeKind::Intensity, |_, _, _| f32::from_bits(r.random::<u32>() & 0xbf7f_ffff)).unwrap(),
            NiftiDatatype::Float32,
        ),
    ];
    for (i, (v, dt)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("rt{i}.nii"));
        write_nifti(v, &path, &VolumeHeaderInfo::new(*dt, "roundtrip")).unwrap();
        let (back, info) = read_nifti_with_info(&path).unwrap();
        roundtrip &=
            info.datatype == *dt && back.dims() == v.dims() && back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let expected_ours: BTreeMap<String, Readback> =
        serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("ours_readback.json")).unwrap()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut ours_ok = true;
    for (name, v, dt) in written_fixtures() {
        let path = out.path().join(name);
        write_nifti(&v, &path, &VolumeHeaderInfo::new(dt, "fixture")).unwrap();
        let same_bytes = std::fs::read(&path).unwrap() == std::fs::read(fixture_dir().join(name)).unwrap();
        ours_ok &= same_bytes && expected_ours.get(name).is_some_and(|rb| matches_readback(&v, rb));
    }
    let live = live_nibabel(out.path());
    let live_ok = match &live {
        Some(map) => written_fixtures().iter().all(|(name, v, _)| map.get(*name).is_some_and(|rb| matches_readback(v, rb))),
        None => true,
    };

    let expected_nib: BTreeMap<String, Readback> =
        serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("expected.json")).unwrap()).unwrap();
    let mut nib_ok = expected_nib.len() == 5;
    for (name, rb) in &expected_nib {
        let v = read_nifti(fixture_dir().join(name)).unwrap();
        nib_ok &= matches_readback(&v, rb);
    }
    let live_note = if live.is_some() {
        format!("live nibabel readback agrees: {live_ok}")
    } else {
        "live nibabel unavailable, recorded readback used".into()
    };
    outcome(
        roundtrip && ours_ok && live_ok && nib_ok,
        format!("uint8/int16/float32 roundtrip bit-exact: {roundtrip}; 5 written files match recorded nibabel readback: {ours_ok}; {live_note}; 5 nibabel-written files decode identically: {nib_ok}"),
    )
}

/// Writes the `ours_*` fixtures and their nibabel readback; used once when
/// the fixture set changes.
fn bless() {
    let dir = fixture_dir();
    for (name, v, dt) in written_fixtures() {
        write_nifti(&v, dir.join(name), &VolumeHeaderInfo::new(dt, "fixture")).unwrap();
    }
    let tmp = tempfile::tempdir().unwrap();
    for (name, _, _) in written_fixtures() {
        std::fs::copy(dir.join(name), tmp.path().join(name)).unwrap();
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/nifti_crosscheck.py");
    let out = Command::new("python3").arg(script).arg("read").arg(tmp.path()).output().expect("python3 with nibabel");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.join("ours_readback.json"), out.stdout).unwrap();
}

fn main() {
    if std::env::var_os("VSEG_BLESS_FIXTURES").is_some() {
        bless();
        return;
    }
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient integrity", criterion_1),
        (2, "metric oracle", criterion_2),
        (3, "equivariance base case", criterion_3),
        (4, "multi-scale weight invariance", criterion_4),
        (5, "pipeline identity", criterion_5),
        (6, "overfit sanity", criterion_6),
        (7, "directional method ordering", criterion_7),
        (8, "Frangi properties", criterion_8),
        (9, "determinism and resume", criterion_9),
        (10, "I/O fidelity", criterion_10),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {n:>2} {:<4} {name}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
