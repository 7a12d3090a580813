//! 3D U-Net whose decoder emits a sigmoid prediction at each of the `m`
//! finest levels, every one resized to the input's spatial size.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Batch statistics after every 3³ convolution, in training and inference.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of resolution levels; `depth - 1` poolings.
    pub depth: usize,
    pub base_channels: usize,
    /// Number of supervised decoder scales `m`.
    pub supervision_scales: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub normalization: Normalization,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 4,
            base_channels: 16,
            supervision_scales: 3,
            in_channels: 1,
            out_channels: 1,
            normalization: Normalization::None,
        }
    }
}

const BN_EPS: f64 = 1e-5;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("depth {} must be at least 2", self.depth)));
        }
        if self.supervision_scales < 1 || self.supervision_scales > self.depth - 1 {
            return Err(Error::InvalidConfig(format!(
                "supervision scales {} must lie in 1..={} for depth {}",
                self.supervision_scales,
                self.depth - 1,
                self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn pooling_period(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<()> {
        let p = self.pooling_period();
        if dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(Error::ShapeMismatch(format!("spatial dims {dims:?} must be positive multiples of {p} for depth {}", self.depth)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let bn = self.normalization == Normalization::Batch;
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, ci: usize, co: usize, k: usize, norm: bool| {
            out.push((format!("{name}.weight"), vec![co, ci, k, k, k]));
            out.push((format!("{name}.bias"), vec![co]));
            if norm {
                out.push((format!("{name}.gamma"), vec![co]));
                out.push((format!("{name}.beta"), vec![co]));
            }
        };
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            conv(&mut out, format!("enc{l}.conv1"), prev, c, 3, bn);
            conv(&mut out, format!("enc{l}.conv2"), c, c, 3, bn);
            prev = c;
        }
        for l in (0..self.depth - 1).rev() {
            let c = self.channels(l);
            conv(&mut out, format!("dec{l}.up"), self.channels(l + 1), c, 3, bn);
            conv(&mut out, format!("dec{l}.conv1"), 2 * c, c, 3, bn);
            conv(&mut out, format!("dec{l}.conv2"), c, c, 3, bn);
        }
        for s in 0..self.supervision_scales {
            conv(&mut out, format!("head{}", s + 1), self.channels(s), self.out_channels, 1, false);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named network weights in the order of [`NetworkConfig::parameter_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    config: NetworkConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases, unit
    /// normalization scales; drawn from the "init" stream of `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| T::from_f64_lossy(d.sample(&mut rng))).collect()
            } else if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Parameters { config: *config, names, tensors })
    }

    /// Checks names and shapes against `config` and that all values are finite.
    pub fn from_parts(config: NetworkConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != names.len() || names.len() != tensors.len() {
            return Err(Error::InvalidParams(format!(
                "expected {} parameter tensors, got {} names and {} tensors",
                expected.len(),
                names.len(),
                tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(names.iter().zip(&tensors)) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::InvalidParams(format!("parameter {n} {:?} does not match expected {en} {es:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter {n}")));
            }
        }
        Ok(Parameters { config, names, tensors })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters { config: self.config, names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Places every tensor on `g`, as trainable parameters or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect()
    }
}

/// Per-scale probability maps, index 0 = finest, all at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput<T> {
    pub scales: Vec<Tensor<T>>,
}

impl<T: Real> MultiScaleOutput<T> {
    pub fn finest(&self) -> &Tensor<T> {
        &self.scales[0]
    }
}

struct Cursor<'a> {
    nodes: &'a [NodeId],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> NodeId {
        let n = self.nodes[self.next];
        self.next += 1;
        n
    }
}

fn conv_block<T: Real>(g: &mut Graph<T>, cur: &mut Cursor, x: NodeId, norm: Normalization) -> Result<NodeId> {
    let (w, b) = (cur.take(), cur.take());
    let mut h = g.conv3d(x, w, b, 1, 1)?;
    if norm == Normalization::Batch {
        let (gamma, beta) = (cur.take(), cur.take());
        h = g.batch_norm(h, gamma, beta, BN_EPS)?;
    }
    g.relu(h)
}

/// Builds the network on `g` from bound parameter nodes (see
/// [`Parameters::bind`]) and returns one probability node per scale,
/// finest first, each shaped `(batch, out, X, Y, Z)`.
pub fn forward_graph<T: Real>(g: &mut Graph<T>, config: &NetworkConfig, params: &[NodeId], x: NodeId) -> Result<Vec<NodeId>> {
    config.validate()?;
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 5 || shape[1] != config.in_channels {
        return Err(Error::ShapeMismatch(format!("network input must be (batch, {}, X, Y, Z), got {shape:?}", config.in_channels)));
    }
    let size = [shape[2], shape[3], shape[4]];
    config.check_spatial(size)?;
    if params.len() != config.parameter_shapes().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter nodes for a network needing {}",
            params.len(),
            config.parameter_shapes().len()
        )));
    }
    let norm = config.normalization;
    let mut cur = Cursor { nodes: params, next: 0 };
    let mut skips = Vec::with_capacity(config.depth);
    let mut h = x;
    for l in 0..config.depth {
        if l > 0 {
            h = g.max_pool3d(h)?;
        }
        h = conv_block(g, &mut cur, h, norm)?;
        h = conv_block(g, &mut cur, h, norm)?;
        skips.push(h);
    }
    let mut decoded = vec![None; config.depth - 1];
    for l in (0..config.depth - 1).rev() {
        let up = g.upsample2x(h)?;
        let up = conv_block(g, &mut cur, up, norm)?;
        let cat = g.concat(&[skips[l], up], 1)?;
        h = conv_block(g, &mut cur, cat, norm)?;
        h = conv_block(g, &mut cur, h, norm)?;
        decoded[l] = Some(h);
    }
    let mut outs = Vec::with_capacity(config.supervision_scales);
    for level in decoded.iter().take(config.supervision_scales) {
        let (w, b) = (cur.take(), cur.take());
        let logits = g.conv3d(level.expect("decoded level"), w, b, 0, 1)?;
        let p = g.sigmoid(logits)?;
        let p = if g.value(p).shape()[2..] == size { p } else { g.upsample_to(p, size)? };
        outs.push(p);
    }
    Ok(outs)
}

/// Inference without recording a tape.
pub fn forward<T: Real>(params: &Parameters<T>, x: &Tensor<T>) -> Result<MultiScaleOutput<T>> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, false);
    let xn = g.constant(x.clone());
    let outs = forward_graph(&mut g, &params.config, &nodes, xn)?;
    Ok(MultiScaleOutput { scales: outs.into_iter().map(|o| g.value(o).clone()).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "test");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let c = NetworkConfig { depth: 3, base_channels: 4, supervision_scales: 2, ..Default::default() };
        let a = Parameters::<f32>::build(&c, 5).unwrap();
        assert_eq!(a, Parameters::<f32>::build(&c, 5).unwrap());
        assert_ne!(a, Parameters::<f32>::build(&c, 6).unwrap());
    }

    #[test]
    fn parameter_counts_match_enumeration_script() {
        // scripts/param_count.py
        let cases = [
            ((4, 16, 3), Normalization::None, 1_604_947, 40),
            ((4, 8, 3), Normalization::None, 401_579, 40),
            ((2, 4, 1), Normalization::None, 5_333, 16),
            ((3, 8, 2), Normalization::None, 97_194, 28),
            ((4, 16, 3), Normalization::Batch, 1_606_579, 74),
            ((3, 8, 2), Normalization::Batch, 97_562, 52),
        ];
        for ((depth, base, m), normalization, total, tensors) in cases {
            let c = NetworkConfig { depth, base_channels: base, supervision_scales: m, normalization, ..Default::default() };
            assert_eq!(c.parameter_count(), total, "{c:?}");
            let p = Parameters::<f32>::build(&c, 0).unwrap();
            assert_eq!(p.count(), total);
            assert_eq!(p.names().len(), tensors);
        }
    }

    #[test]
    fn init_statistics_follow_fan_in() {
        let c = NetworkConfig::default();
        let p = Parameters::<f64>::build(&c, 1).unwrap();
        let w = p.get("enc3.conv2.weight").unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / (128.0 * 27.0);
        assert!(mean.abs() < 4.0 * (want / n).sqrt());
        assert!((var / want - 1.0).abs() < 0.02);
        assert!(p.get("dec0.up.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let m_eq_depth = NetworkConfig { supervision_scales: 4, ..Default::default() };
        assert!(matches!(Parameters::<f32>::build(&m_eq_depth, 0), Err(Error::InvalidConfig(_))));
        let m_zero = NetworkConfig { supervision_scales: 0, ..Default::default() };
        assert!(m_zero.validate().is_err());
    }

    #[test]
    fn zero_heads_on_zero_input_give_one_half() {
        let c = NetworkConfig { depth: 3, base_channels: 4, supervision_scales: 2, ..Default::default() };
        let mut p = Parameters::<f64>::build(&c, 2).unwrap();
        for h in ["head1.weight", "head2.weight"] {
            p.get_mut(h).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = forward(&p, &Tensor::zeros(&[2, 1, 8, 4, 8])).unwrap();
        assert_eq!(out.scales.len(), 2);
        for s in &out.scales {
            assert_eq!(s.shape(), &[2, 1, 8, 4, 8]);
            assert!(s.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn outputs_are_probabilities_at_input_size() {
        for normalization in [Normalization::None, Normalization::Batch] {
            let c = NetworkConfig { depth: 4, base_channels: 2, supervision_scales: 3, normalization, ..Default::default() };
            let p = Parameters::<f32>::build(&c, 3).unwrap();
            let x = random_input(&[1, 1, 16, 8, 8], 4).cast::<f32>();
            let out = forward(&p, &x).unwrap();
            for s in &out.scales {
                assert_eq!(s.shape(), &[1, 1, 16, 8, 8]);
                assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let c = NetworkConfig { depth: 3, base_channels: 2, supervision_scales: 1, ..Default::default() };
        let p = Parameters::<f32>::build(&c, 0).unwrap();
        assert!(matches!(forward(&p, &Tensor::zeros(&[1, 1, 8, 6, 8])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let c = NetworkConfig { depth: 3, base_channels: 4, supervision_scales: 2, ..Default::default() };
        let p = Parameters::<f32>::build(&c, 8).unwrap();
        let x = random_input(&[2, 1, 8, 8, 8], 9).cast::<f32>();
        assert_eq!(forward(&p, &x).unwrap(), forward(&p, &x).unwrap());
    }

    #[test]
    fn shift_by_pooling_period_shifts_interior_outputs() {
        // depth 2: one pooling, period 2; 32³ leaves an interior beyond the
        // receptive field reach of the zero padding
        let c = NetworkConfig { depth: 2, base_channels: 3, supervision_scales: 1, ..Default::default() };
        let p = Parameters::<f64>::build(&c, 10).unwrap();
        let n = 32;
        let x = random_input(&[1, 1, n, n, n], 11);
        let shift = 2;
        let shifted = Tensor::new(
            vec![1, 1, n, n, n],
            (0..n * n * n)
                .map(|i| {
                    let (xx, rest) = (i % n, i / n);
                    if xx >= shift {
                        x.data()[i - shift]
                    } else {
                        x.data()[rest * n + xx]
                    }
                })
                .collect(),
        )
        .unwrap();
        let a = forward(&p, &x).unwrap();
        let b = forward(&p, &shifted).unwrap();
        let margin = 10;
        let mut checked = 0;
        for z in margin..n - margin {
            for y in margin..n - margin {
                for xx in margin + shift..n - margin {
                    let i = xx + n * (y + n * z);
                    assert!((b.finest().data()[i] - a.finest().data()[i - shift]).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn tiny_network_gradient_matches_finite_differences() {
        // gradient w.r.t. the input through every layer and head
        let c = NetworkConfig { depth: 2, base_channels: 2, supervision_scales: 1, ..Default::default() };
        let p = Parameters::<f64>::build(&c, 12).unwrap();
        let x = random_input(&[1, 1, 8, 8, 8], 13);
        let rep = grad_check(
            |g, xn| {
                let nodes = p.bind(g, false);
                let outs = forward_graph(g, &c, &nodes, xn)?;
                let sq = g.mul(outs[0], outs[0])?;
                g.sum(sq)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
