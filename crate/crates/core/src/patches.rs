//! Sliding-window patch grids, seeded patch sampling, and mean-blended
//! reassembly of per-window predictions.

use std::sync::mpsc;
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::NetworkConfig;
use crate::volume::{Volume3D, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { patch_size: [64; 3], stride: [32, 32, 16] }
    }
}

impl PatchSpec {
    pub fn new(patch_size: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let s = PatchSpec { patch_size, stride };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.patch_size[a] {
                return Err(Error::InvalidConfig(format!(
                    "stride {:?} must satisfy 0 < stride <= patch size {:?}",
                    self.stride, self.patch_size
                )));
            }
        }
        Ok(())
    }

    /// Patch sizes must be multiples of the network's pooling period.
    pub fn check_network(&self, net: &NetworkConfig) -> Result<()> {
        self.validate()?;
        net.check_spatial(self.patch_size)
            .map_err(|_| Error::InvalidConfig(format!("patch size {:?} is not a multiple of {}", self.patch_size, net.pooling_period())))
    }

    pub fn voxels(&self) -> usize {
        self.patch_size.iter().product()
    }
}

/// Window origins per axis; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub dims: [usize; 3],
    pub spec: PatchSpec,
    pub origins: [Vec<usize>; 3],
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Origin of window `i`; x varies fastest.
    pub fn window(&self, i: usize) -> [usize; 3] {
        let [ox, oy, oz] = &self.origins;
        let (ix, rest) = (i % ox.len(), i / ox.len());
        let (iy, iz) = (rest % oy.len(), rest / oy.len());
        [ox[ix], oy[iy], oz[iz]]
    }

    pub fn windows(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.len()).map(|i| self.window(i))
    }
}

fn axis_origins(d: usize, p: usize, s: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..=(d - p) / s).map(|k| k * s).collect();
    if (d - p) % s != 0 {
        o.push(d - p);
    }
    o
}

/// Origins `0, S, 2S, …` per axis plus a final flush window at `D - P`.
pub fn extract_grid(dims: [usize; 3], spec: &PatchSpec) -> Result<PatchGrid> {
    spec.validate()?;
    if (0..3).any(|a| dims[a] < spec.patch_size[a]) {
        return Err(Error::VolumeSmallerThanPatch { dims, patch: spec.patch_size });
    }
    let origins = [0, 1, 2].map(|a| axis_origins(dims[a], spec.patch_size[a], spec.stride[a]));
    Ok(PatchGrid { dims, spec: *spec, origins })
}

/// An intensity volume with its training label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub image: Volume3D,
    pub label: Volume3D,
}

/// One sampled training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub volume: usize,
    pub origin: [usize; 3],
    pub x: Volume3D,
    pub y: Volume3D,
}

/// `count` draws of `(volume, window)` uniformly over all pairs, with
/// replacement, in the order the generator yields them.
pub fn sample_windows<R: Rng>(set: &[LabeledVolume], spec: &PatchSpec, count: usize, rng: &mut R) -> Result<Vec<(usize, [usize; 3])>> {
    if set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if count == 0 {
        return Err(Error::InvalidConfig("patch count must be positive".into()));
    }
    let grids = set.iter().map(|v| extract_grid(v.image.dims(), spec)).collect::<Result<Vec<_>>>()?;
    let total: usize = grids.iter().map(PatchGrid::len).sum();
    Ok((0..count)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut vi = 0;
            while k >= grids[vi].len() {
                k -= grids[vi].len();
                vi += 1;
            }
            (vi, grids[vi].window(k))
        })
        .collect())
}

/// Crops the drawn windows lazily, in draw order.
pub fn sample_epoch<'a, R: Rng>(
    set: &'a [LabeledVolume],
    spec: &PatchSpec,
    count: usize,
    rng: &mut R,
) -> Result<impl Iterator<Item = Result<PatchPair>> + Send + 'a> {
    for v in set {
        if v.image.dims() != v.label.dims() {
            return Err(Error::ShapeMismatch(format!("image {:?} and label {:?} differ", v.image.dims(), v.label.dims())));
        }
    }
    let draws = sample_windows(set, spec, count, rng)?;
    let size = spec.patch_size;
    Ok(draws.into_iter().map(move |(vi, origin)| {
        let v = &set[vi];
        Ok(PatchPair { volume: vi, origin, x: v.image.crop(origin, size)?, y: v.label.crop(origin, size)? })
    }))
}

/// Runs `consume` on the items of `items` while a producer thread keeps up
/// to `depth` items ready. Items arrive in the iterator's own order.
pub fn with_prefetch<I, R>(items: I, depth: usize, consume: impl FnOnce(&mut dyn Iterator<Item = I::Item>) -> R) -> R
where
    I: Iterator + Send,
    I::Item: Send,
{
    if depth == 0 {
        let mut it = items;
        return consume(&mut it);
    }
    thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(depth);
        s.spawn(move || {
            for item in items {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        let mut it = rx.into_iter();
        consume(&mut it)
    })
}

/// Accumulates per-window predictions and averages overlaps.
#[derive(Debug, Clone)]
pub struct Reassembler {
    grid: PatchGrid,
    sum: Vec<f64>,
    count: Vec<u32>,
    seen: Vec<bool>,
}

impl Reassembler {
    pub fn new(grid: PatchGrid) -> Self {
        let n = grid.dims.iter().product();
        let w = grid.len();
        Reassembler { grid, sum: vec![0.0; n], count: vec![0; n], seen: vec![false; w] }
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// Adds the prediction for window `index`, laid out x-fastest.
    pub fn add(&mut self, index: usize, patch: &[f32]) -> Result<()> {
        let [px, py, pz] = self.grid.spec.patch_size;
        if index >= self.grid.len() || patch.len() != px * py * pz {
            return Err(Error::ShapeMismatch(format!(
                "window {index} of {} with {} values (patch holds {})",
                self.grid.len(),
                patch.len(),
                px * py * pz
            )));
        }
        let [nx, ny, _] = self.grid.dims;
        let [ox, oy, oz] = self.grid.window(index);
        for z in 0..pz {
            for y in 0..py {
                let src = (z * py + y) * px;
                let dst = ox + nx * ((oy + y) + ny * (oz + z));
                for x in 0..px {
                    self.sum[dst + x] += f64::from(patch[src + x]);
                    self.count[dst + x] += 1;
                }
            }
        }
        self.seen[index] = true;
        Ok(())
    }

    /// Mean of the collected predictions, tagged as `kind`.
    pub fn finish(self, kind: VolumeKind) -> Result<Volume3D> {
        if let Some(missing) = self.seen.iter().position(|s| !s) {
            return Err(Error::MissingWindow(missing));
        }
        let data = self.sum.iter().zip(&self.count).map(|(s, &c)| (s / f64::from(c)) as f32).collect();
        Volume3D::from_data(self.grid.dims, data, kind)
    }
}

/// Mean over all windows covering each voxel; `patches[i]` belongs to window `i`.
pub fn reassemble(grid: &PatchGrid, patches: &[Vec<f32>], kind: VolumeKind) -> Result<Volume3D> {
    if patches.len() < grid.len() {
        return Err(Error::MissingWindow(patches.len()));
    }
    if patches.len() > grid.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} windows", patches.len(), grid.len())));
    }
    let mut r = Reassembler::new(grid.clone());
    for (i, p) in patches.iter().enumerate() {
        r.add(i, p)?;
    }
    r.finish(kind)
}
