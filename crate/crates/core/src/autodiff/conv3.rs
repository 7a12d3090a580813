//! Direct kernels for the 3³, stride-1, padding-1 convolution that every
//! U-Net block uses. Rows along x are processed with a zero-padded copy so the
//! three x-taps fuse into one pass over the output row.

use super::tensor::Real;

const LANES: usize = 8;

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    for v in acc {
        s += v;
    }
    s
}

#[inline]
fn fused3<T: Real>(o: &mut [T], p: &[T], w0: T, w1: T, w2: T) {
    let n = o.len();
    let (p0, p1, p2) = (&p[..n], &p[1..n + 1], &p[2..n + 2]);
    for i in 0..n {
        o[i] += w0 * p0[i] + w1 * p1[i] + w2 * p2[i];
    }
}

#[inline]
fn padded_row<T: Real>(dst: &mut [T], src: &[T]) {
    let n = src.len();
    dst[0] = T::zero();
    dst[1..n + 1].copy_from_slice(src);
    dst[n + 1] = T::zero();
}

/// One sample: `x` is `ci × n`, `w` is `co × ci × 27`, `out` is `co × n`
/// and already holds the bias.
pub(super) fn forward<T: Real>(x: &[T], w: &[T], ci: usize, co: usize, dims: [usize; 3], out: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut pad = vec![T::zero(); nx + 2];
    for z in 0..nz {
        for y in 0..ny {
            let off = (z * ny + y) * nx;
            for c in 0..ci {
                for kz in 0..3 {
                    let iz = z + kz;
                    if iz == 0 || iz > nz {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy == 0 || iy > ny {
                            continue;
                        }
                        let src = c * n + ((iz - 1) * ny + (iy - 1)) * nx;
                        padded_row(&mut pad, &x[src..src + nx]);
                        for o in 0..co {
                            let wk = &w[(o * ci + c) * 27 + (kz * 3 + ky) * 3..][..3];
                            fused3(&mut out[o * n + off..o * n + off + nx], &pad, wk[0], wk[1], wk[2]);
                        }
                    }
                }
            }
        }
    }
}

/// Input gradient for one sample: correlation of `g` (`co × n`) with the
/// flipped kernel, accumulated into `dx` (`ci × n`).
pub(super) fn backward_input<T: Real>(g: &[T], w: &[T], ci: usize, co: usize, dims: [usize; 3], dx: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut pad = vec![T::zero(); nx + 2];
    for z in 0..nz {
        for y in 0..ny {
            let off = (z * ny + y) * nx;
            for o in 0..co {
                for kz in 0..3 {
                    // output row oz = z - kz + 1
                    let oz = z + 1;
                    if oz < kz || oz - kz >= nz {
                        continue;
                    }
                    let oz = oz - kz;
                    for ky in 0..3 {
                        let oy = y + 1;
                        if oy < ky || oy - ky >= ny {
                            continue;
                        }
                        let oy = oy - ky;
                        let src = o * n + (oz * ny + oy) * nx;
                        padded_row(&mut pad, &g[src..src + nx]);
                        for c in 0..ci {
                            let wk = &w[(o * ci + c) * 27 + (kz * 3 + ky) * 3..][..3];
                            fused3(&mut dx[c * n + off..c * n + off + nx], &pad, wk[2], wk[1], wk[0]);
                        }
                    }
                }
            }
        }
    }
}

/// Kernel gradient for one sample, accumulated into `dw` (`co × ci × 27`).
pub(super) fn backward_weight<T: Real>(x: &[T], g: &[T], ci: usize, co: usize, dims: [usize; 3], dw: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut pad = vec![T::zero(); nx + 2];
    for z in 0..nz {
        for y in 0..ny {
            let off = (z * ny + y) * nx;
            for c in 0..ci {
                for kz in 0..3 {
                    let iz = z + kz;
                    if iz == 0 || iz > nz {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy == 0 || iy > ny {
                            continue;
                        }
                        let src = c * n + ((iz - 1) * ny + (iy - 1)) * nx;
                        padded_row(&mut pad, &x[src..src + nx]);
                        for o in 0..co {
                            let gr = &g[o * n + off..o * n + off + nx];
                            let base = (o * ci + c) * 27 + (kz * 3 + ky) * 3;
                            dw[base] += dot(gr, &pad[..nx]);
                            dw[base + 1] += dot(gr, &pad[1..nx + 1]);
                            dw[base + 2] += dot(gr, &pad[2..nx + 2]);
                        }
                    }
                }
            }
        }
    }
}
