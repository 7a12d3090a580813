//! Multiscale Hessian vesselness (Frangi) for bright tubular structures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume3D, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselnessParams {
    /// Gaussian scales in voxels.
    pub scales: Vec<f64>,
    /// Plate/line sensitivity.
    pub alpha: f64,
    /// Blob sensitivity.
    pub beta: f64,
    /// Structure sensitivity; `None` uses half the largest Hessian
    /// Frobenius norm at each scale.
    pub c: Option<f64>,
    /// Mask threshold as a fraction of the maximum response.
    pub threshold: f64,
}

impl Default for VesselnessParams {
    fn default() -> Self {
        VesselnessParams { scales: vec![0.5, 1.0, 1.5, 2.0], alpha: 0.5, beta: 0.5, c: None, threshold: 0.5 }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidParams("scale list is empty".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParams(format!("scales {:?} must be positive", self.scales)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidParams(format!("alpha {} and beta {} must be positive", self.alpha, self.beta)));
        }
        if let Some(c) = self.c {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParams(format!("c = {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// The six distinct second derivatives, each a volume in voxel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    pub dims: [usize; 3],
    pub xx: Vec<f64>,
    pub yy: Vec<f64>,
    pub zz: Vec<f64>,
    pub xy: Vec<f64>,
    pub xz: Vec<f64>,
    pub yz: Vec<f64>,
}

/// Normalized Gaussian taps truncated at `4σ`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis] as isize;
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z][axis] as isize;
                let base = x + nx * (y + ny * z) - pos as usize * stride;
                let mut s = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let p = (pos + j as isize - r).clamp(0, n - 1) as usize;
                    s += w * data[base + p * stride];
                }
                slab[x + nx * y] = s;
            }
        }
    });
    let _ = nz;
    out
}

/// Separable Gaussian smoothing with clamp-to-edge boundaries.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let mut d = data.to_vec();
    for axis in 0..3 {
        d = convolve_axis(&d, dims, axis, &k);
    }
    d
}

/// Hessian of the `σ`-smoothed volume by central differences, scaled by `σ²`.
pub fn hessian_at_scale(v: &Volume3D, sigma: f64) -> Result<Hessian> {
    let data: Vec<f64> = v.data().iter().map(|&x| f64::from(x)).collect();
    hessian_of(&data, v.dims(), sigma)
}

pub fn hessian_of(data: &[f64], dims: [usize; 3], sigma: f64) -> Result<Hessian> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParams(format!("scale {sigma} must be positive")));
    }
    if data.len() != dims.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!("{} values for dims {dims:?}", data.len())));
    }
    let [nx, ny, nz] = dims;
    let s = gaussian_smooth(data, dims, sigma);
    let n = s.len();
    let norm = sigma * sigma;
    let at = |x: isize, y: isize, z: isize| {
        let x = x.clamp(0, nx as isize - 1) as usize;
        let y = y.clamp(0, ny as isize - 1) as usize;
        let z = z.clamp(0, nz as isize - 1) as usize;
        s[x + nx * (y + ny * z)]
    };
    let mut h =
        Hessian { dims, xx: vec![0.0; n], yy: vec![0.0; n], zz: vec![0.0; n], xy: vec![0.0; n], xz: vec![0.0; n], yz: vec![0.0; n] };
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let i = x as usize + nx * (y as usize + ny * z as usize);
                let c = at(x, y, z);
                h.xx[i] = norm * (at(x + 1, y, z) - 2.0 * c + at(x - 1, y, z));
                h.yy[i] = norm * (at(x, y + 1, z) - 2.0 * c + at(x, y - 1, z));
                h.zz[i] = norm * (at(x, y, z + 1) - 2.0 * c + at(x, y, z - 1));
                h.xy[i] = norm * 0.25 * (at(x + 1, y + 1, z) - at(x + 1, y - 1, z) - at(x - 1, y + 1, z) + at(x - 1, y - 1, z));
                h.xz[i] = norm * 0.25 * (at(x + 1, y, z + 1) - at(x + 1, y, z - 1) - at(x - 1, y, z + 1) + at(x - 1, y, z - 1));
                h.yz[i] = norm * 0.25 * (at(x, y + 1, z + 1) - at(x, y + 1, z - 1) - at(x, y - 1, z + 1) + at(x, y - 1, z - 1));
            }
        }
    }
    Ok(h)
}

/// Eigenvalues of a symmetric 3×3 matrix (closed-form trigonometric
/// method), ordered `|λ₁| ≤ |λ₂| ≤ |λ₃|`; ties keep the solver's order.
pub fn symmetric_eigenvalues(a11: f64, a22: f64, a33: f64, a12: f64, a13: f64, a23: f64) -> [f64; 3] {
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    let mut e = if p1 == 0.0 {
        [a11, a22, a33]
    } else {
        let q = (a11 + a22 + a33) / 3.0;
        let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let (b11, b22, b33) = ((a11 - q) / p, (a22 - q) / p, (a33 - q) / p);
        let (b12, b13, b23) = (a12 / p, a13 / p, a23 / p);
        let det = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13) + b13 * (b12 * b23 - b22 * b13);
        let r = (det / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    };
    e.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    e
}

/// Frangi response for ordered eigenvalues, bright-vessel polarity.
pub fn vesselness(l: [f64; 3], alpha: f64, beta: f64, c: f64) -> f64 {
    let [l1, l2, l3] = l;
    if l2 > 0.0 || l3 > 0.0 || l3 == 0.0 || l2 == 0.0 {
        return 0.0;
    }
    let ra = l2.abs() / l3.abs();
    let rb = l1.abs() / (l2 * l3).abs().sqrt();
    let s2 = l1 * l1 + l2 * l2 + l3 * l3;
    let v = (1.0 - (-ra * ra / (2.0 * alpha * alpha)).exp()) * (-rb * rb / (2.0 * beta * beta)).exp() * (1.0 - (-s2 / (2.0 * c * c)).exp());
    v.clamp(0.0, 1.0)
}

/// Vesselness at one scale. Returns the response and the `c` used.
pub fn vesselness_at_scale(v: &Volume3D, sigma: f64, params: &VesselnessParams) -> Result<(Vec<f64>, f64)> {
    Ok(vesselness_of(&hessian_at_scale(v, sigma)?, params))
}

/// Vesselness from a precomputed Hessian. Returns the response and the `c` used.
pub fn vesselness_of(h: &Hessian, params: &VesselnessParams) -> (Vec<f64>, f64) {
    let n = h.xx.len();
    let c = match params.c {
        Some(c) => c,
        None => {
            let max_frob = (0..n)
                .map(|i| {
                    (h.xx[i].powi(2) + h.yy[i].powi(2) + h.zz[i].powi(2) + 2.0 * (h.xy[i].powi(2) + h.xz[i].powi(2) + h.yz[i].powi(2)))
                        .sqrt()
                })
                .fold(0.0f64, f64::max);
            0.5 * max_frob
        }
    };
    if c == 0.0 {
        return (vec![0.0; n], c);
    }
    let out = (0..n)
        .into_par_iter()
        .map(|i| {
            let e = symmetric_eigenvalues(h.xx[i], h.yy[i], h.zz[i], h.xy[i], h.xz[i], h.yz[i]);
            vesselness(e, params.alpha, params.beta, c)
        })
        .collect();
    (out, c)
}

/// Voxelwise maximum over scales, and the mask `V ≥ threshold · max V`.
pub fn frangi_multiscale(v: &Volume3D, params: &VesselnessParams) -> Result<(Volume3D, Volume3D)> {
    params.validate()?;
    let mut best = vec![0.0f64; v.len()];
    for &s in &params.scales {
        let (r, _) = vesselness_at_scale(v, s, params)?;
        for (b, x) in best.iter_mut().zip(r) {
            if x > *b {
                *b = x;
            }
        }
    }
    let max = best.iter().copied().fold(0.0, f64::max);
    let cut = params.threshold * max;
    let mask: Vec<f32> = best.iter().map(|&x| if max > 0.0 && x >= cut { 1.0 } else { 0.0 }).collect();
    let response = Volume3D::new(v.dims(), v.spacing(), best.iter().map(|&x| x as f32).collect(), VolumeKind::Probability)?;
    let mask = Volume3D::new(v.dims(), v.spacing(), mask, VolumeKind::BinaryMask)?;
    Ok((response, mask))
}
