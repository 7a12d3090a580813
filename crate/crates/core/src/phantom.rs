//! Synthetic vessel phantoms with exact labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frangi::gaussian_smooth;
use crate::rng;
use crate::volume::{write_nifti, Volume3D, VolumeHeaderInfo, VolumeKind};

/// Distance between consecutive centerline samples, in voxels.
pub const SAMPLE_STEP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Inclusive range of tubes per volume.
    pub vessel_count: (usize, usize),
    /// Radii are drawn as `lo + (hi - lo) u²`, favoring thin tubes.
    pub radius_range: (f64, f64),
    /// Catmull-Rom waypoints per tube.
    pub waypoints: usize,
    pub vessel_intensity: f32,
    pub background_intensity: f32,
    pub noise_sigma: f64,
    /// Point-spread blur; 0 disables it.
    pub blur_sigma: f64,
    /// Chance that a centerline segment receives a gap in the corrupted label.
    pub gap_probability: f64,
    /// Arclength of one corruption segment.
    pub gap_segment_length: f64,
    /// Arclength removed by a gap.
    pub gap_length: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [96, 96, 96],
            spacing: [0.3, 0.3, 0.3],
            vessel_count: (6, 10),
            radius_range: (0.75, 3.0),
            waypoints: 4,
            vessel_intensity: 1.0,
            background_intensity: 0.1,
            noise_sigma: 0.05,
            blur_sigma: 0.6,
            gap_probability: 0.0,
            gap_segment_length: 16.0,
            gap_length: 8.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dims.iter().any(|&d| d < 4) {
            return bad(format!("dims {:?} must be at least 4 per axis", self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("radius range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if self.vessel_count.0 > self.vessel_count.1 {
            return bad(format!("vessel count range {:?} is empty", self.vessel_count));
        }
        if self.waypoints < 2 {
            return bad(format!("need at least 2 waypoints, got {}", self.waypoints));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return bad(format!("noise {} and blur {} must be non-negative", self.noise_sigma, self.blur_sigma));
        }
        if !(0.0..=1.0).contains(&self.gap_probability) {
            return bad(format!("gap probability {} outside [0, 1]", self.gap_probability));
        }
        if !(self.gap_segment_length > 0.0 && self.gap_length >= 0.0) {
            return bad("gap lengths must be positive".into());
        }
        Ok(())
    }
}

/// A constant-radius tube around a densely sampled centerline.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub samples: Vec<[f64; 3]>,
    pub radius: f64,
    /// Per sample: whether it lies inside a label gap.
    pub gap: Vec<bool>,
}

impl Tube {
    /// Straight segment from `a` to `b` without gaps.
    pub fn straight(a: [f64; 3], b: [f64; 3], radius: f64) -> Self {
        let len = dist(a, b);
        let n = (len / SAMPLE_STEP).ceil().max(1.0) as usize;
        let samples: Vec<[f64; 3]> = (0..=n).map(|i| lerp(a, b, i as f64 / n as f64)).collect();
        let gap = vec![false; samples.len()];
        Tube { samples, radius, gap }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

fn catmull_rom(p0: [f64; 3], p1: [f64; 3], p2: [f64; 3], p3: [f64; 3], t: f64) -> [f64; 3] {
    let (t2, t3) = (t * t, t * t * t);
    std::array::from_fn(|k| {
        0.5 * (2.0 * p1[k]
            + (p2[k] - p0[k]) * t
            + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
            + (3.0 * p1[k] - p0[k] - 3.0 * p2[k] + p3[k]) * t3)
    })
}

/// Dense samples of the Catmull-Rom curve through `points`, spaced by at
/// most [`SAMPLE_STEP`].
pub fn spline_samples(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = points.len();
    let at = |i: isize| points[i.clamp(0, n as isize - 1) as usize];
    let mut out = vec![points[0]];
    for i in 0..n.saturating_sub(1) {
        let i = i as isize;
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        let mut prev = p1;
        let mut len = 0.0;
        for s in 1..=64 {
            let q = catmull_rom(p0, p1, p2, p3, s as f64 / 64.0);
            len += dist(prev, q);
            prev = q;
        }
        let steps = ((8.0 * len / SAMPLE_STEP).ceil() as usize).max(1);
        let mut last = *out.last().unwrap_or(&p1);
        let mut prev = last;
        for s in 1..=steps {
            let q = catmull_rom(p0, p1, p2, p3, s as f64 / steps as f64);
            if dist(last, q) > SAMPLE_STEP {
                out.push(prev);
                last = prev;
            }
            prev = q;
        }
        out.push(prev);
    }
    out
}

fn random_tube(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Tube {
    let d = cfg.dims.map(|x| x as f64);
    // enter and leave through opposite faces so tubes cross the field of view
    let axis = rng.random_range(0..3usize);
    let mut points = Vec::with_capacity(cfg.waypoints);
    for w in 0..cfg.waypoints {
        let frac = w as f64 / (cfg.waypoints - 1) as f64;
        let p: [f64; 3] =
            std::array::from_fn(|k| if k == axis { -2.0 + frac * (d[k] + 3.0) } else { rng.random_range(0.15 * d[k]..0.85 * d[k]) });
        points.push(p);
    }
    let (lo, hi) = cfg.radius_range;
    let u: f64 = rng.random();
    let radius = lo + (hi - lo) * u * u;
    let samples = spline_samples(&points);
    let mut gap = vec![false; samples.len()];
    if cfg.gap_probability > 0.0 {
        let mut arc = Vec::with_capacity(samples.len());
        let mut acc = 0.0;
        for (i, s) in samples.iter().enumerate() {
            if i > 0 {
                acc += dist(samples[i - 1], *s);
            }
            arc.push(acc);
        }
        let segments = (acc / cfg.gap_segment_length).ceil() as usize;
        for seg in 0..segments {
            if rng.random::<f64>() >= cfg.gap_probability {
                continue;
            }
            let start = seg as f64 * cfg.gap_segment_length;
            let room = (cfg.gap_segment_length - cfg.gap_length).max(0.0);
            let g0 = start + rng.random::<f64>() * room;
            for (flag, a) in gap.iter_mut().zip(&arc) {
                if *a >= g0 && *a <= g0 + cfg.gap_length {
                    *flag = true;
                }
            }
        }
    }
    Tube { samples, radius, gap }
}

/// Clean and gap-corrupted label masks: a voxel is labeled iff its center lies
/// within the radius of a centerline sample (a non-gap sample for the corrupted mask).
pub fn rasterize(dims: [usize; 3], tubes: &[Tube]) -> (Vec<f32>, Vec<f32>) {
    let [nx, ny, nz] = dims;
    let mut clean = vec![0.0f32; nx * ny * nz];
    let mut kept = vec![0.0f32; nx * ny * nz];
    for t in tubes {
        let r2 = t.radius * t.radius;
        for (p, &g) in t.samples.iter().zip(&t.gap) {
            let lo = |k: usize| (p[k] - t.radius).ceil().max(0.0) as usize;
            let hi = |k: usize| ((p[k] + t.radius).floor()).min(dims[k] as f64 - 1.0);
            let (hx, hy, hz) = (hi(0), hi(1), hi(2));
            if hx < 0.0 || hy < 0.0 || hz < 0.0 {
                continue;
            }
            for z in lo(2)..=hz as usize {
                for y in lo(1)..=hy as usize {
                    for x in lo(0)..=hx as usize {
                        let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2) + (z as f64 - p[2]).powi(2);
                        if d2 <= r2 {
                            let i = x + nx * (y + ny * z);
                            clean[i] = 1.0;
                            if !g {
                                kept[i] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    (clean, kept)
}

/// Intensity image from a label: two-level contrast, optional blur, additive noise.
pub fn render_intensity(cfg: &PhantomConfig, label: &[f32], rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let (bg, fg) = (cfg.background_intensity, cfg.vessel_intensity);
    let mut img: Vec<f32> = label.iter().map(|&l| (fg - bg) * l + bg).collect();
    if cfg.blur_sigma > 0.0 {
        let d: Vec<f64> = img.iter().map(|&x| f64::from(x)).collect();
        img = gaussian_smooth(&d, cfg.dims, cfg.blur_sigma).into_iter().map(|x| x as f32).collect();
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for v in img.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    Ok(img)
}

/// One phantom: intensity, clean label, corrupted label.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume3D,
    pub clean: Volume3D,
    pub corrupted: Volume3D,
}

/// Phantom for the given tubes, drawing noise from `rng`.
pub fn render(cfg: &PhantomConfig, tubes: &[Tube], rng: &mut ChaCha8Rng) -> Result<Phantom> {
    cfg.validate()?;
    let (clean, corrupted) = rasterize(cfg.dims, tubes);
    let image = render_intensity(cfg, &clean, rng)?;
    Ok(Phantom {
        image: Volume3D::new(cfg.dims, cfg.spacing, image, VolumeKind::Intensity)?,
        clean: Volume3D::new(cfg.dims, cfg.spacing, clean, VolumeKind::BinaryMask)?,
        corrupted: Volume3D::new(cfg.dims, cfg.spacing, corrupted, VolumeKind::BinaryMask)?,
    })
}

/// Random phantom from the "phantom" stream of `seed`.
pub fn generate(cfg: &PhantomConfig, seed: u64) -> Result<Phantom> {
    generate_with(cfg, &mut rng::stream(seed, rng::STREAM_PHANTOM))
}

pub fn generate_with(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    cfg.validate()?;
    let count = rng.random_range(cfg.vessel_count.0..=cfg.vessel_count.1);
    let tubes: Vec<Tube> = (0..count).map(|_| random_tube(cfg, rng)).collect();
    render(cfg, &tubes, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split sizes in the ratio 6:2:3 by largest remainder, with every split non-empty.
pub fn split_sizes(n: usize) -> Result<[usize; 3]> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!("{n} volumes cannot fill train/val/test")));
    }
    let ratio = [6usize, 2, 3];
    let mut sizes = ratio.map(|r| r * n / 11);
    let mut rema: Vec<(usize, usize)> = ratio.iter().enumerate().map(|(i, r)| (r * n % 11, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - sizes.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        sizes[i] += 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap_or(0);
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    Ok(sizes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub phantom: Phantom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: PhantomConfig,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == s)
    }
}

/// `n` independent phantoms with a seeded 6:2:3 split. Volume `i` draws from
/// its own stream, so generation parallelizes without changing results.
pub fn make_dataset(n: usize, cfg: &PhantomConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let sizes = split_sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "phantom/split");
    for i in (1..n).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let mut split = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let phantoms: Vec<Phantom> = (0..n)
        .into_par_iter()
        .map(|i| generate_with(cfg, &mut rng::stream(seed, &format!("{}/{i}", rng::STREAM_PHANTOM))))
        .collect::<Result<_>>()?;
    let entries = phantoms
        .into_iter()
        .enumerate()
        .map(|(i, phantom)| DatasetEntry { id: format!("phantom_{i:03}"), split: split[i], phantom })
        .collect();
    Ok(Dataset { seed, config: cfg.clone(), entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub label: PathBuf,
    pub label_noisy: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub volumes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// Writes `{split}_images/`, `{split}_labels/`, `{split}_labels_noisy/` and a
/// manifest with paths relative to `dir`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut volumes = Vec::new();
    for e in &ds.entries {
        let s = e.split.as_str();
        let rel = |kind: &str| PathBuf::from(format!("{s}_{kind}")).join(format!("{}.nii", e.id));
        let entry = ManifestEntry {
            id: e.id.clone(),
            split: e.split,
            image: rel("images"),
            label: rel("labels"),
            label_noisy: rel("labels_noisy"),
        };
        for (v, p) in [(&e.phantom.image, &entry.image), (&e.phantom.clean, &entry.label), (&e.phantom.corrupted, &entry.label_noisy)] {
            let path = dir.join(p);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
            }
            write_nifti(v, &path, &VolumeHeaderInfo::new(crate::volume::NiftiDatatype::for_kind(v.kind()), e.id.as_str()))?;
        }
        volumes.push(entry);
    }
    let manifest = DatasetManifest { seed: ds.seed, config: ds.config.clone(), volumes };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}
