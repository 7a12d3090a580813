//! Forward and backward kernels for the spatial primitives.

use rayon::prelude::*;

use super::conv3;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub batch: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(Error::ShapeMismatch(format!("conv3d expects rank-5 input and kernel, got {x:?} and {w:?}")));
        }
        let k = w[2];
        if w[3] != k || w[4] != k {
            return Err(Error::ShapeMismatch(format!("conv3d kernel must be cubic, got {w:?}")));
        }
        if w[1] != x[1] {
            return Err(Error::ShapeMismatch(format!("conv3d kernel expects {} input channels, input has {}", w[1], x[1])));
        }
        if b != [w[0]] {
            return Err(Error::ShapeMismatch(format!("conv3d bias shape {b:?} should be [{}]", w[0])));
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch("conv3d stride must be positive".into()));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = x[2 + a] + 2 * pad;
            if span < k {
                return Err(Error::ShapeMismatch(format!("conv3d kernel {k} larger than padded input {span} on axis {a}")));
            }
            out_dims[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeom { batch: x[0], ci: x[1], co: w[0], k, stride, pad, in_dims: [x[2], x[3], x[4]], out_dims })
    }

    fn n_in(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }

    /// 1³ kernels without padding or striding read the input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.stride == 1
    }

    /// 3³ kernel, stride 1, padding 1: handled by the direct kernels.
    fn is_same3(&self) -> bool {
        self.k == 3 && self.pad == 1 && self.stride == 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.co, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let n_in = self.in_dims[axis] as isize;
        let n_out = self.out_dims[axis];
        let s = self.stride as isize;
        let shift = kk as isize - self.pad as isize;
        // need 0 <= o*s + shift < n_in
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = if n_in - shift <= 0 { 0 } else { ((n_in - shift) + s - 1) / s };
        let lo = (lo as usize).min(n_out);
        let hi = (hi.max(0) as usize).min(n_out);
        (lo, hi.max(lo))
    }
}

/// Visits every (row, output-voxel, input-voxel) triple of the column matrix,
/// one x-run at a time: `f(row, out_start, in_start, run_len)`. Positions that
/// fall in the zero padding are never visited.
fn for_each_run(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let k = g.k;
    let [nx, ny, _] = g.in_dims;
    let [ox, oy, _] = g.out_dims;
    let s = g.stride;
    for c in 0..g.ci {
        for kz in 0..k {
            let (z_lo, z_hi) = g.valid(2, kz);
            for ky in 0..k {
                let (y_lo, y_hi) = g.valid(1, ky);
                for kx in 0..k {
                    let (x_lo, x_hi) = g.valid(0, kx);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oz in z_lo..z_hi {
                        let iz = oz * s + kz - g.pad;
                        for oy_i in y_lo..y_hi {
                            let iy = oy_i * s + ky - g.pad;
                            let out_start = (oz * oy + oy_i) * ox + x_lo;
                            let ix0 = x_lo * s + kx - g.pad;
                            let in_start = c * g.n_in() + (iz * ny + iy) * nx + ix0;
                            f(row, out_start, in_start, x_hi - x_lo);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let n_out = g.n_out();
    col.fill(T::zero());
    let s = g.stride;
    for_each_run(g, |row, out_start, in_start, len| {
        let dst = &mut col[row * n_out + out_start..row * n_out + out_start + len];
        if s == 1 {
            dst.copy_from_slice(&x[in_start..in_start + len]);
        } else {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = x[in_start + i * s];
            }
        }
    });
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let n_out = g.n_out();
    let s = g.stride;
    for_each_run(g, |row, out_start, in_start, len| {
        let src = &col[row * n_out + out_start..row * n_out + out_start + len];
        if s == 1 {
            for (d, &v) in dx[in_start..in_start + len].iter_mut().zip(src) {
                *d += v;
            }
        } else {
            for (i, &v) in src.iter().enumerate() {
                dx[in_start + i * s] += v;
            }
        }
    });
}

pub(super) fn conv3d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n_in = g.n_in();
    let n_out = g.n_out();
    let rows = g.rows();
    let mut out = vec![T::zero(); g.batch * g.co * n_out];
    out.par_chunks_mut(g.co * n_out).zip(x.data().par_chunks(g.ci * n_in)).for_each(|(o, xs)| {
        for (c, chunk) in o.chunks_mut(n_out).enumerate() {
            chunk.fill(b.data()[c]);
        }
        if g.is_same3() {
            conv3::forward(xs, w.data(), g.ci, g.co, g.in_dims, o);
        } else if g.is_pointwise() {
            T::gemm(g.co, rows, n_out, w.data(), false, xs, false, T::one(), o);
        } else {
            let mut col = vec![T::zero(); rows * n_out];
            im2col(g, xs, &mut col);
            T::gemm(g.co, rows, n_out, w.data(), false, &col, false, T::one(), o);
        }
    });
    Tensor::from_parts(g.out_shape(), out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(super) fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let n_in = g.n_in();
    let n_out = g.n_out();
    let rows = g.rows();
    let mut dx = if need_dx { vec![T::zero(); g.batch * g.ci * n_in] } else { Vec::new() };
    let x_chunks: Vec<&[T]> = x.data().chunks(g.ci * n_in).collect();
    let g_chunks: Vec<&[T]> = gout.data().chunks(g.co * n_out).collect();

    let per_sample = |bi: usize, dxs: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let xs = x_chunks[bi];
        let gs = g_chunks[bi];
        let mut dw = vec![T::zero(); g.co * rows];
        let db: Vec<T> = gs.chunks(n_out).map(|c| c.iter().copied().sum()).collect();
        if g.is_same3() {
            conv3::backward_weight(xs, gs, g.ci, g.co, g.in_dims, &mut dw);
            if let Some(dxs) = dxs {
                conv3::backward_input(gs, w.data(), g.ci, g.co, g.in_dims, dxs);
            }
        } else if g.is_pointwise() {
            T::gemm(g.co, n_out, rows, gs, false, xs, true, T::zero(), &mut dw);
            if let Some(dxs) = dxs {
                T::gemm(rows, g.co, n_out, w.data(), true, gs, false, T::zero(), dxs);
            }
        } else {
            let mut col = vec![T::zero(); rows * n_out];
            im2col(g, xs, &mut col);
            T::gemm(g.co, n_out, rows, gs, false, &col, true, T::zero(), &mut dw);
            if let Some(dxs) = dxs {
                T::gemm(rows, g.co, n_out, w.data(), true, gs, false, T::zero(), &mut col);
                col2im(g, &col, dxs);
            }
        }
        (dw, db)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if need_dx {
        dx.par_chunks_mut(g.ci * n_in).enumerate().map(|(bi, dxs)| per_sample(bi, Some(dxs))).collect()
    } else {
        (0..g.batch).into_par_iter().map(|bi| per_sample(bi, None)).collect()
    };

    // fixed summation order keeps results independent of scheduling
    let mut dw = vec![T::zero(); g.co * rows];
    let mut db = vec![T::zero(); g.co];
    for (pw, pb) in partials {
        for (a, v) in dw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, v) in db.iter_mut().zip(pb) {
            *a += v;
        }
    }
    (
        need_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.co], db),
    )
}

/// 2³ max-pool with stride 2. Ties go to the lowest flat index.
pub(super) fn max_pool_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [nx, ny, nz] = x.spatial()?;
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("max-pool needs even spatial dims, got {:?}", [nx, ny, nz])));
    }
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let planes = x.shape()[0] * x.shape()[1];
    let n_in = nx * ny * nz;
    let n_out = ox * oy * oz;
    let mut out = vec![T::zero(); planes * n_out];
    let mut arg = vec![0usize; planes * n_out];
    for p in 0..planes {
        let xs = &x.data()[p * n_in..(p + 1) * n_in];
        for z in 0..oz {
            for y in 0..oy {
                for xx in 0..ox {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * xx + dx) + nx * ((2 * y + dy) + ny * (2 * z + dz));
                                let v = xs[i];
                                if best_i == usize::MAX || v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = p * n_out + xx + ox * (y + oy * z);
                    out[o] = best;
                    arg[o] = p * n_in + best_i;
                }
            }
        }
    }
    let shape = vec![x.shape()[0], x.shape()[1], ox, oy, oz];
    Ok((Tensor::from_parts(shape, out), arg))
}

fn index_map(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out).map(|i| i * n_in / n_out).collect()
}

/// Nearest-neighbour resize: output index `i` reads input `floor(i * in / out)`.
pub(super) fn upsample_forward<T: Real>(x: &Tensor<T>, size: [usize; 3]) -> Result<Tensor<T>> {
    let [nx, ny, nz] = x.spatial()?;
    if size.contains(&0) {
        return Err(Error::NonPositiveTarget(size.to_vec()));
    }
    let (mx, my, mz) = (index_map(nx, size[0]), index_map(ny, size[1]), index_map(nz, size[2]));
    let planes = x.shape()[0] * x.shape()[1];
    let n_in = nx * ny * nz;
    let n_out: usize = size.iter().product();
    let mut out = Vec::with_capacity(planes * n_out);
    for p in 0..planes {
        let xs = &x.data()[p * n_in..(p + 1) * n_in];
        for &iz in &mz {
            for &iy in &my {
                let row = &xs[(iz * ny + iy) * nx..(iz * ny + iy + 1) * nx];
                out.extend(mx.iter().map(|&ix| row[ix]));
            }
        }
    }
    let shape = vec![x.shape()[0], x.shape()[1], size[0], size[1], size[2]];
    Ok(Tensor::from_parts(shape, out))
}

pub(super) fn upsample_backward<T: Real>(x_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (nx, ny, nz) = (x_shape[2], x_shape[3], x_shape[4]);
    let size = [gout.shape()[2], gout.shape()[3], gout.shape()[4]];
    let (mx, my, mz) = (index_map(nx, size[0]), index_map(ny, size[1]), index_map(nz, size[2]));
    let planes = x_shape[0] * x_shape[1];
    let n_in = nx * ny * nz;
    let n_out: usize = size.iter().product();
    let mut dx = vec![T::zero(); planes * n_in];
    for p in 0..planes {
        let gs = &gout.data()[p * n_out..(p + 1) * n_out];
        let d = &mut dx[p * n_in..(p + 1) * n_in];
        let mut o = 0;
        for &iz in &mz {
            for &iy in &my {
                let base = (iz * ny + iy) * nx;
                for &ix in &mx {
                    d[base + ix] += gs[o];
                    o += 1;
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
pub(super) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn concat_forward<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::ShapeMismatch("concat needs at least one input".into()))?;
    let rank = first.shape().len();
    if axis > 1 || axis >= rank {
        return Err(Error::ShapeMismatch(format!("concat supports the batch and channel axes only, got axis {axis} for rank {rank}")));
    }
    for t in xs {
        let s = t.shape();
        if s.len() != rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape()[i]) {
            return Err(Error::ShapeMismatch(format!("concat along axis {axis}: {:?} vs {:?}", first.shape(), s)));
        }
    }
    let (outer, _, inner) = axis_blocks(first.shape(), axis);
    let total: usize = xs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in xs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(super) fn slice_forward<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis > 1 || axis >= rank || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::ShapeMismatch(format!("slice axis {axis} [{start}, {}) of shape {:?}", start + len, x.shape())));
    }
    let (outer, extent, inner) = axis_blocks(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub(super) fn slice_backward<T: Real>(x_shape: &[usize], axis: usize, start: usize, gout: &Tensor<T>) -> Tensor<T> {
    let (outer, extent, inner) = axis_blocks(x_shape, axis);
    let len = gout.shape()[axis];
    let mut dx = vec![T::zero(); x_shape.iter().product()];
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        dx[base..base + len * inner].copy_from_slice(&gout.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// Per-channel statistics over batch and spatial positions.
pub(super) struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_check(x: &[usize], p: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if x.len() < 2 || p != [x[1]] {
        return Err(Error::ShapeMismatch(format!("{what}: per-channel parameter {p:?} does not match input {x:?}")));
    }
    let spatial = x[2..].iter().product();
    Ok((x[0], x[1], spatial))
}

pub(super) fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    channel_check(x.shape(), beta.shape(), "batch-norm")?;
    let (nb, nc, ns) = channel_check(x.shape(), gamma.shape(), "batch-norm")?;
    let m = T::from_usize(nb * ns).unwrap();
    let mut mean = vec![T::zero(); nc];
    let mut var = vec![T::zero(); nc];
    for c in 0..nc {
        let mut s = T::zero();
        for b in 0..nb {
            let off = (b * nc + c) * ns;
            s += x.data()[off..off + ns].iter().copied().sum::<T>();
        }
        mean[c] = s / m;
        let mut v = T::zero();
        for b in 0..nb {
            let off = (b * nc + c) * ns;
            v += x.data()[off..off + ns].iter().map(|&a| (a - mean[c]) * (a - mean[c])).sum::<T>();
        }
        var[c] = v / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * ns;
            for i in off..off + ns {
                xhat[i] = (x.data()[i] - mean[c]) * inv_std[c];
                out[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), BatchNormSaved { xhat, inv_std, mean, var }))
}

pub(super) fn batch_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nb, nc, ns) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let m = T::from_usize(nb * ns).unwrap();
    let mut dgamma = vec![T::zero(); nc];
    let mut dbeta = vec![T::zero(); nc];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * ns;
            for i in off..off + ns {
                dgamma[c] += gout.data()[i] * saved.xhat[i];
                dbeta[c] += gout.data()[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gout.len()];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * ns;
            let g = gamma.data()[c];
            // sum(dxhat) = g * dbeta, sum(dxhat * xhat) = g * dgamma
            for i in off..off + ns {
                let dxhat = gout.data()[i] * g;
                dx[i] = saved.inv_std[c] / m * (m * dxhat - g * dbeta[c] - saved.xhat[i] * g * dgamma[c]);
            }
        }
    }
    (Tensor::from_parts(shape.to_vec(), dx), Tensor::from_parts(vec![nc], dgamma), Tensor::from_parts(vec![nc], dbeta))
}

pub(super) fn channel_affine_forward<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    channel_check(x.shape(), shift.shape(), "channel-affine")?;
    let (nb, nc, ns) = channel_check(x.shape(), scale.shape(), "channel-affine")?;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * ns;
            for i in off..off + ns {
                out[i] = x.data()[i] * scale.data()[c] + shift.data()[c];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(super) fn channel_affine_backward<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (nb, nc, ns) = (s[0], s[1], s[2..].iter().product::<usize>());
    let mut dx = vec![T::zero(); x.len()];
    let mut dscale = vec![T::zero(); nc];
    let mut dshift = vec![T::zero(); nc];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * ns;
            for i in off..off + ns {
                dx[i] = gout.data()[i] * scale.data()[c];
                dscale[c] += gout.data()[i] * x.data()[i];
                dshift[c] += gout.data()[i];
            }
        }
    }
    (Tensor::from_parts(s.to_vec(), dx), Tensor::from_parts(vec![nc], dscale), Tensor::from_parts(vec![nc], dshift))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, pad).unwrap();
        let [nx, ny, nz] = g.in_dims;
        let [ox, oy, oz] = g.out_dims;
        let k = g.k;
        let mut out = vec![0.0; g.batch * g.co * ox * oy * oz];
        for bi in 0..g.batch {
            for co in 0..g.co {
                for z in 0..oz {
                    for y in 0..oy {
                        for xx in 0..ox {
                            let mut acc = b.data()[co];
                            for ci in 0..g.ci {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let ix = (xx * stride + kx) as isize - pad as isize;
                                            let iy = (y * stride + ky) as isize - pad as isize;
                                            let iz = (z * stride + kz) as isize - pad as isize;
                                            if ix < 0 || iy < 0 || iz < 0 || ix >= nx as isize || iy >= ny as isize || iz >= nz as isize {
                                                continue;
                                            }
                                            let xi = ((bi * g.ci + ci) * nz + iz as usize) * ny * nx + iy as usize * nx + ix as usize;
                                            let wi = (co * g.ci + ci) * k * k * k + (kz * k + ky) * k + kx;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out[((bi * g.co + co) * oz + z) * oy * ox + y * ox + xx] = acc;
                        }
                    }
                }
            }
        }
        Tensor::new(g.out_shape(), out).unwrap()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3), (2, 0, 2)] {
            let x = Tensor::new(vec![2, 2, 5, 4, 6], pseudo(480, 1)).unwrap();
            let w = Tensor::new(vec![3, 2, k, k, k], pseudo(6 * k * k * k, 2)).unwrap();
            let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, pad).unwrap();
            let fast = conv3d_forward(&x, &w, &b, &g);
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, c) in fast.data().iter().zip(slow.data()) {
                assert!((a - c).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn direct_kernel_gradients_match_im2col_path() {
        let x = Tensor::new(vec![2, 3, 5, 4, 3], pseudo(360, 3)).unwrap();
        let w = Tensor::new(vec![2, 3, 3, 3, 3], pseudo(162, 4)).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), 1, 1).unwrap();
        assert!(g.is_same3());
        let gout = Tensor::new(g.out_shape(), pseudo(240, 5)).unwrap();
        let (dx, dw, _) = conv3d_backward(&x, &w, &gout, &g, true);
        // reference: generic path through the column matrix
        let mut dw_ref = vec![0.0; dw.len()];
        let mut dx_ref = vec![0.0; x.len()];
        for bi in 0..2 {
            let xs = &x.data()[bi * 180..(bi + 1) * 180];
            let gs = &gout.data()[bi * 120..(bi + 1) * 120];
            let mut col = vec![0.0; g.rows() * g.n_out()];
            im2col(&g, xs, &mut col);
            f64::gemm(2, 60, 81, gs, false, &col, true, 1.0, &mut dw_ref);
            f64::gemm(81, 2, 60, w.data(), true, gs, false, 0.0, &mut col);
            col2im(&g, &col, &mut dx_ref[bi * 180..(bi + 1) * 180]);
        }
        for (a, r) in dw.data().iter().zip(&dw_ref) {
            assert!((a - r).abs() < 1e-12);
        }
        for (a, r) in dx.unwrap().data().iter().zip(&dx_ref) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = Tensor::new(vec![1, 2, 4, 5, 3], pseudo(120, 5)).unwrap();
        let w = Tensor::<f64>::zeros(&[1, 2, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        for stride in [1, 2] {
            let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, 1).unwrap();
            let mut col = vec![0.0; g.rows() * g.n_out()];
            im2col(&g, x.data(), &mut col);
            let y = pseudo(col.len(), 9);
            let mut back = vec![0.0; x.len()];
            col2im(&g, &y, &mut back);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn max_pool_prefers_lowest_index_on_ties() {
        let x = Tensor::new(vec![1, 1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let (out, arg) = max_pool_forward(&x).unwrap();
        assert_eq!(out.data(), &[1.0]);
        assert_eq!(arg, vec![0]);
        assert!(max_pool_forward(&Tensor::new(vec![1, 1, 3, 2, 2], vec![0.0; 12]).unwrap()).is_err());
    }

    #[test]
    fn nearest_resize_uses_floor_mapping() {
        assert_eq!(index_map(2, 4), vec![0, 0, 1, 1]);
        assert_eq!(index_map(3, 4), vec![0, 0, 1, 2]);
        assert_eq!(index_map(4, 2), vec![0, 2]);
    }
}
