//! Elastic deformation fields: per-slice 2D displacement maps, Gaussian
//! smoothing, and nearest-neighbour backward warping.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::Volume3D;

/// Distribution of the raw (pre-smoothing) displacement noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `Uniform(-s, s)`.
    Uniform,
    /// `Normal(0, s)`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    /// Range of the per-slice scale `s`.
    pub scale_range: (f64, f64),
    /// Number of taps of the smoothing kernel (odd).
    pub kernel_size: usize,
    /// Standard deviation of the smoothing kernel, in pixels.
    pub kernel_sigma: f64,
    pub noise: NoiseKind,
    /// Sample one map and reuse it for every slice.
    pub shared_across_slices: bool,
}

impl Default for DeformationParams {
    fn default() -> Self {
        DeformationParams {
            scale_range: (1.0, 5.0),
            kernel_size: 15,
            kernel_sigma: 100.0,
            noise: NoiseKind::Uniform,
            shared_across_slices: false,
        }
    }
}

impl DeformationParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::InvalidParams(format!("scale range ({lo}, {hi}) must satisfy 0 <= low <= high")));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidParams(format!("kernel size {} must be odd and positive", self.kernel_size)));
        }
        if !(self.kernel_sigma.is_finite() && self.kernel_sigma > 0.0) {
            return Err(Error::InvalidParams(format!("kernel sigma {} must be positive", self.kernel_sigma)));
        }
        Ok(())
    }

    /// Normalized Gaussian taps, centre at index `kernel_size / 2`.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.kernel_size / 2) as f64;
        let taps: Vec<f64> = (0..self.kernel_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.kernel_sigma * self.kernel_sigma)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / total).collect()
    }
}

/// Displacements `dx`, `dy` (voxel units) for every voxel, stored slice by
/// slice with the same x-fastest layout as [`Volume3D`]. There is no
/// displacement along z.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    dims: [usize; 3],
    dx: Vec<f64>,
    dy: Vec<f64>,
    seed: u64,
}

impl DeformationField {
    pub fn new(dims: [usize; 3], dx: Vec<f64>, dy: Vec<f64>, seed: u64) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("field dims {dims:?} must be positive")));
        }
        if dx.len() != n || dy.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "field of dims {dims:?} needs {n} values per component, got {} and {}",
                dx.len(),
                dy.len()
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deformation field".into()));
        }
        Ok(DeformationField { dims, dx, dy, seed })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        DeformationField { dims, dx: vec![0.0; n], dy: vec![0.0; n], seed: 0 }
    }

    /// Same displacement `(dx, dy)` everywhere.
    pub fn constant(dims: [usize; 3], dx: f64, dy: f64) -> Self {
        let n = dims.iter().product();
        DeformationField { dims, dx: vec![dx; n], dy: vec![dy; n], seed: 0 }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Source voxel of every output voxel under backward nearest warping.
    pub fn gather_indices(&self) -> Vec<usize> {
        let [nx, ny, nz] = self.dims;
        let mut idx = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let sx = clamp_round(x as f64 + self.dx[i], nx);
                    let sy = clamp_round(y as f64 + self.dy[i], ny);
                    idx.push(sx + nx * (sy + ny * z));
                }
            }
        }
        idx
    }

    /// Gather indices for a tensor holding `blocks` consecutive volumes of
    /// this field's dims, e.g. the `(batch, channel)` blocks of a rank-5 tensor.
    pub fn gather_indices_blocked(&self, blocks: usize) -> Vec<usize> {
        let base = self.gather_indices();
        let n = base.len();
        let mut out = Vec::with_capacity(n * blocks);
        for b in 0..blocks {
            out.extend(base.iter().map(|&i| i + b * n));
        }
        out
    }
}

fn clamp_round(v: f64, n: usize) -> usize {
    let r = v.round();
    if r <= 0.0 {
        0
    } else if r >= (n - 1) as f64 {
        n - 1
    } else {
        r as usize
    }
}

fn draw_map<R: Rng>(rng: &mut R, n: usize, s: f64, kind: NoiseKind) -> Vec<f64> {
    match kind {
        NoiseKind::Uniform => {
            if s == 0.0 {
                return vec![0.0; n];
            }
            let d = Uniform::new_inclusive(-s, s).expect("finite bounds");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        NoiseKind::Gaussian => {
            let d = Normal::new(0.0, s).expect("finite sigma");
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// Unsmoothed displacement maps, drawing from `rng`. [`sample_field_with`]
/// consumes exactly the same draws.
pub fn sample_raw_with<R: Rng>(dims: [usize; 3], params: &DeformationParams, rng: &mut R, seed: u64) -> Result<DeformationField> {
    params.validate()?;
    if dims.contains(&0) {
        return Err(Error::InvalidVolume(format!("field dims {dims:?} must be positive")));
    }
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let (lo, hi) = params.scale_range;
    let mut dx = Vec::with_capacity(plane * nz);
    let mut dy = Vec::with_capacity(plane * nz);
    let slices = if params.shared_across_slices { 1 } else { nz };
    for _ in 0..slices {
        let s = if lo == hi { lo } else { rng.random_range(lo..hi) };
        dx.extend(draw_map(rng, plane, s, params.noise));
        dy.extend(draw_map(rng, plane, s, params.noise));
    }
    if params.shared_across_slices {
        let (sx, sy) = (dx.clone(), dy.clone());
        for _ in 1..nz {
            dx.extend_from_slice(&sx);
            dy.extend_from_slice(&sy);
        }
    }
    DeformationField::new(dims, dx, dy, seed)
}

/// Smoothed field drawing from an existing generator.
pub fn sample_field_with<R: Rng>(dims: [usize; 3], params: &DeformationParams, rng: &mut R, seed: u64) -> Result<DeformationField> {
    let raw = sample_raw_with(dims, params, rng, seed)?;
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let mut dx = Vec::with_capacity(raw.dx.len());
    let mut dy = Vec::with_capacity(raw.dy.len());
    for z in 0..nz {
        let r = z * plane..(z + 1) * plane;
        dx.extend(smooth_field(&raw.dx[r.clone()], nx, ny, params));
        dy.extend(smooth_field(&raw.dy[r], nx, ny, params));
    }
    DeformationField::new(dims, dx, dy, seed)
}

/// Field from the "deform" stream of `seed`.
pub fn sample_field(dims: [usize; 3], params: &DeformationParams, seed: u64) -> Result<DeformationField> {
    let mut rng = rng::stream(seed, rng::STREAM_DEFORM);
    sample_field_with(dims, params, &mut rng, seed)
}

/// Raw maps from the "deform" stream of `seed`, before smoothing.
pub fn sample_raw(dims: [usize; 3], params: &DeformationParams, seed: u64) -> Result<DeformationField> {
    let mut rng = rng::stream(seed, rng::STREAM_DEFORM);
    sample_raw_with(dims, params, &mut rng, seed)
}

/// Separable convolution of an `nx × ny` map with the normalized kernel of
/// `params`, clamping reads at the edges.
pub fn smooth_field(map: &[f64], nx: usize, ny: usize, params: &DeformationParams) -> Vec<f64> {
    assert_eq!(map.len(), nx * ny, "map length must be nx * ny");
    let k = params.kernel();
    let r = (k.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let mut s = 0.0;
            for (j, w) in k.iter().enumerate() {
                s += w * map[at(x as isize + j as isize - r, nx) + nx * y];
            }
            tmp[x + nx * y] = s;
        }
    }
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let mut s = 0.0;
            for (j, w) in k.iter().enumerate() {
                s += w * tmp[x + nx * at(y as isize + j as isize - r, ny)];
            }
            out[x + nx * y] = s;
        }
    }
    out
}

/// Warps `data` (laid out with the field's dims) by gathering.
pub fn warp_slice<T: Copy>(data: &[T], t: &DeformationField) -> Result<Vec<T>> {
    let n: usize = t.dims.iter().product();
    if data.len() != n {
        return Err(Error::ShapeMismatch(format!("{} values cannot be warped by a field of dims {:?}", data.len(), t.dims)));
    }
    Ok(t.gather_indices().into_iter().map(|i| data[i]).collect())
}

/// `out(x,y,z) = in(clamp(round(x+dx)), clamp(round(y+dy)), z)`.
pub fn warp(v: &Volume3D, t: &DeformationField) -> Result<Volume3D> {
    if v.dims() != t.dims {
        return Err(Error::ShapeMismatch(format!("volume dims {:?} differ from field dims {:?}", v.dims(), t.dims)));
    }
    v.with_data(warp_slice(v.data(), t)?, v.kind())
}
