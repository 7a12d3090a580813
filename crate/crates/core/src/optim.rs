//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::unet::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && self.lr.is_finite() && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// Step count and first/second moments mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamParams,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[Tensor<T>], hyper: AdamParams) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn for_params(params: &Parameters<T>, hyper: AdamParams) -> Self {
        Self::new(params.tensors(), hyper)
    }
}

/// One update of `params` in place. Fails without touching anything when a
/// gradient is non-finite or mis-shaped.
pub fn adam_update<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    state.hyper.validate()?;
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch(format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let h = state.hyper;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - h.beta1.powf(t);
    let c2 = 1.0 - h.beta2.powf(t);
    let (b1, b2) = (T::from_f64_lossy(h.beta1), T::from_f64_lossy(h.beta2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - h.beta1), T::from_f64_lossy(1.0 - h.beta2));
    let (lr, eps) = (T::from_f64_lossy(h.lr), T::from_f64_lossy(h.eps));
    let (ic1, ic2) = (T::from_f64_lossy(1.0 / c1), T::from_f64_lossy(1.0 / c2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let mh = *mv * ic1;
            let vh = *vv * ic2;
            *pv = *pv - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adam_update`] on network parameters.
pub fn adam_step<T: Real>(params: &mut Parameters<T>, grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    adam_update(params.tensors_mut(), grads, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap()];
        let g = vec![Tensor::new(vec![4], vec![3.0, -0.01, 1e-3, -250.0]).unwrap()];
        let mut s = AdamState::new(&p, AdamParams::default());
        let before = p[0].clone();
        adam_update(&mut p, &g, &mut s).unwrap();
        for i in 0..4 {
            let d: f64 = p[0].data()[i] - before.data()[i];
            let gi: f64 = g[0].data()[i];
            let want = -1e-4 * gi.signum();
            // |g| / (|g| + eps) deviates from 1 by at most eps / |g|
            assert!((d - want).abs() <= 1e-4 * 1e-8 / gi.abs() + 1e-16, "{i}: {d}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = vec![scalar(1.5)];
        let mut s = AdamState::new(&p, AdamParams::default());
        s.m[0] = scalar(0.2);
        s.v[0] = scalar(0.04);
        s.step = 3;
        // with m nonzero the parameter moves; zero moments leave it fixed
        let mut fresh = AdamState::new(&p, AdamParams::default());
        adam_update(&mut p, &[scalar(0.0)], &mut fresh).unwrap();
        assert_eq!(p[0].data()[0], 1.5);
        let mut q = vec![scalar(1.5)];
        adam_update(&mut q, &[scalar(0.0)], &mut s).unwrap();
        assert!((s.m[0].data()[0] - 0.18).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.04 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = vec![scalar(1.0)];
        let mut s = AdamState::new(&w, AdamParams { lr: 0.1, ..Default::default() });
        let mut mags = Vec::new();
        for _ in 0..100 {
            let g = scalar(2.0 * w[0].data()[0]);
            adam_update(&mut w, &[g], &mut s).unwrap();
            mags.push(w[0].data()[0].abs());
        }
        // simulated independently: steady descent for the first steps
        for k in 1..8 {
            assert!(mags[k] < mags[k - 1]);
        }
        assert!(mags[99] < 0.1, "final |w| = {}", mags[99]);
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_simulation() {
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut p = vec![scalar(1.0)];
        let mut s = AdamState::new(&p, AdamParams { lr, ..Default::default() });
        for t in 1..=100 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            let gp = scalar(2.0 * p[0].data()[0]);
            adam_update(&mut p, &[gp], &mut s).unwrap();
            assert!((p[0].data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut p = vec![scalar(1.0), scalar(2.0)];
        let mut s = AdamState::new(&p, AdamParams::default());
        let err = adam_update(&mut p, &[scalar(1.0), scalar(f64::NAN)], &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![scalar(1.0), scalar(2.0)]);
        assert_eq!(s.step, 0);
        assert_eq!(s.m[0].data()[0], 0.0);
    }
}
