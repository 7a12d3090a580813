use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::kernels::{self, BatchNormSaved, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u32,
    index: u32,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Every operation the tape knows how to differentiate.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Inputs `(x, kernel, bias)`; cubic kernel, zero padding.
    Conv3d {
        padding: usize,
        stride: usize,
    },
    /// 2³ window, stride 2.
    MaxPool3d,
    /// Nearest-neighbour ×2 along every spatial axis.
    Upsample2x,
    /// Nearest-neighbour resize to an explicit spatial size.
    UpsampleTo {
        size: [usize; 3],
    },
    /// Concatenation along axis 0 (batch) or 1 (channel).
    Concat {
        axis: usize,
    },
    /// Contiguous range `[start, start + len)` of axis 0 or 1.
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    /// `x^p`. For non-integer `p` the base is clamped at 0.
    Pow(f64),
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Per-sample sum over all non-batch axes, shape `[batch]`.
    BatchSum,
    /// `out[i] = in[indices[i]]` with the given output shape.
    Gather {
        indices: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    /// Inputs `(x, gamma, beta)`; normalizes with batch statistics.
    BatchNorm {
        eps: f64,
    },
    /// Inputs `(x, scale, shift)`; `x * scale[c] + shift[c]`.
    ChannelAffine,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv3d { .. } => "conv3d",
            Primitive::MaxPool3d => "max-pool3d",
            Primitive::Upsample2x => "upsample2x",
            Primitive::UpsampleTo { .. } => "upsample-to",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddScalar(_) => "add-scalar",
            Primitive::MulScalar(_) => "mul-scalar",
            Primitive::Pow(_) => "pow",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::BatchSum => "batch-sum",
            Primitive::Gather { .. } => "gather",
            Primitive::BatchNorm { .. } => "batch-norm",
            Primitive::ChannelAffine => "channel-affine",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Concat { .. } => None,
            Primitive::Conv3d { .. } | Primitive::BatchNorm { .. } | Primitive::ChannelAffine => Some(3),
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => Some(2),
            _ => Some(1),
        }
    }
}

/// Parses attribute-free primitives by name, e.g. `"relu"` or `"max-pool3d"`.
impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "max-pool3d" => Primitive::MaxPool3d,
            "upsample2x" => Primitive::Upsample2x,
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "batch-sum" => Primitive::BatchSum,
            "channel-affine" => Primitive::ChannelAffine,
            "conv3d" => Primitive::Conv3d { padding: 1, stride: 1 },
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

enum Saved<T> {
    None,
    Argmax(Vec<usize>),
    Norm(BatchNormSaved<T>),
}

struct Record<T> {
    prim: Primitive,
    inputs: Vec<NodeId>,
    saved: Saved<T>,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    record: Option<Record<T>>,
}

/// Append-only tape of tensor values.
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    branches: Option<u64>,
}

/// Gradients of a scalar root, indexed by node.
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get_mut(id.index()).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shapes allowed for a binary elementwise op: equal, or one side a
/// single-element rank-1 tensor.
fn broadcast_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.shape() == [1] {
        Ok(a.shape().to_vec())
    } else if a.shape() == [1] {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?} (only scalar broadcasting is supported)", a.shape(), b.shape())))
    }
}

fn zip_bcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>, shape: Vec<usize>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let ai = |i: usize| if a.len() == 1 { a.data()[0] } else { a.data()[i] };
    let bi = |i: usize| if b.len() == 1 { b.data()[0] } else { b.data()[i] };
    Tensor::from_parts(shape, (0..n).map(|i| f(ai(i), bi(i))).collect())
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast<T: Real>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.data().iter().copied().sum())
    }
}

fn pow_value<T: Real>(x: T, p: T, integral: bool) -> T {
    if integral {
        x.powf(p)
    } else if x <= T::zero() {
        T::zero()
    } else {
        x.powf(p)
    }
}

/// Neumaier-compensated sum.
pub(crate) fn accurate_sum<T: Real>(xs: &[T]) -> T {
    let (mut s, mut c) = (T::zero(), T::zero());
    for &x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), branches: None }
    }

    /// Starts hashing the piecewise branches taken by every later op:
    /// ReLU signs, max-pool winners and the clamp of fractional powers.
    pub fn track_branches(&mut self) {
        self.branches.get_or_insert(0xcbf2_9ce4_8422_2325);
    }

    /// Hash of the branches taken so far, if tracking is on. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }
}

fn note_branches<T: Real>(h: &mut u64, prim: &Primitive, x: &Tensor<T>, saved: &Saved<T>) {
    let mut mix = |v: u64| {
        *h ^= v;
        *h = h.wrapping_mul(0x0100_0000_01b3);
    };
    match (prim, saved) {
        (Primitive::Relu, _) => x.data().iter().for_each(|&v| mix(u64::from(v > T::zero()))),
        (Primitive::Pow(p), _) if p.fract() != 0.0 => x.data().iter().for_each(|&v| mix(u64::from(v > T::zero()))),
        (Primitive::MaxPool3d, Saved::Argmax(a)) => a.iter().for_each(|&i| mix(i as u64)),
        _ => {}
    }
}

impl<T: Real> Graph<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, record: Option<Record<T>>) -> NodeId {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, requires_grad, record });
        NodeId { graph: self.id, index }
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        if id.graph != self.id {
            return Err(Error::RootNotOnTape);
        }
        self.nodes.get(id.index()).ok_or(Error::RootNotOnTape)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Value of a node. Panics on a handle from another graph.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.node(id).expect("node belongs to this graph").value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Batch mean and biased variance recorded by a `BatchNorm` node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.node(id).ok()?.record.as_ref()?.saved {
            Saved::Norm(s) => Some((&s.mean, &s.var)),
            _ => None,
        }
    }

    /// Applies `prim` and records it on the tape when any input needs a gradient.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::ShapeMismatch(format!("{} takes {n} inputs, got {}", prim.name(), inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} needs inputs", prim.name())));
        }
        for &i in inputs {
            self.node(i).map_err(|_| Error::ShapeMismatch("input node from another graph".into()))?;
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.index()].requires_grad);
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i.index()].value).collect();
        let (value, saved) = forward(&prim, &vals)?;
        if let Some(h) = self.branches.as_mut() {
            note_branches(h, &prim, vals[0], &saved);
        }
        let record = requires_grad.then(|| Record { prim, inputs: inputs.to_vec(), saved });
        Ok(self.push(value, requires_grad, record))
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: usize, stride: usize) -> Result<NodeId> {
        self.apply(Primitive::Conv3d { padding, stride }, &[x, w, b])
    }

    pub fn max_pool3d(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MaxPool3d, &[x])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Upsample2x, &[x])
    }

    pub fn upsample_to(&mut self, x: NodeId, size: [usize; 3]) -> Result<NodeId> {
        self.apply(Primitive::UpsampleTo { size }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::AddScalar(c), &[x])
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::MulScalar(c), &[x])
    }

    pub fn pow(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.apply(Primitive::Pow(p), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn batch_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::BatchSum, &[x])
    }

    pub fn gather(&mut self, x: NodeId, indices: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::Gather { indices, shape }, &[x])
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::BatchNorm { eps }, &[x, gamma, beta])
    }

    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ChannelAffine, &[x, scale, shift])
    }

    /// Reverse sweep from a scalar root. Gradients of every node reached are
    /// summed over all paths; leaves that require a gradient can be read back.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let node = self.node(root)?;
        if !node.value.is_scalar() {
            return Err(Error::RootNotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index()] = Some(Tensor::full(node.value.shape(), T::one()));
        for i in (0..=root.index()).rev() {
            let Some(rec) = &self.nodes[i].record else { continue };
            let Some(gout) = grads[i].take() else { continue };
            let needs: Vec<bool> = rec.inputs.iter().map(|&j| self.nodes[j.index()].requires_grad).collect();
            let ins: Vec<&Tensor<T>> = rec.inputs.iter().map(|&j| &self.nodes[j.index()].value).collect();
            let in_grads = backward_rule(&rec.prim, &ins, &self.nodes[i].value, &rec.saved, &gout, &needs);
            for ((j, g), need) in rec.inputs.iter().zip(in_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[j.index()] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }
}

fn forward<T: Real>(prim: &Primitive, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let none = |t: Tensor<T>| Ok((t, Saved::None));
    match prim {
        Primitive::Conv3d { padding, stride } => {
            let g = ConvGeom::new(x[0].shape(), x[1].shape(), x[2].shape(), *stride, *padding)?;
            none(kernels::conv3d_forward(x[0], x[1], x[2], &g))
        }
        Primitive::MaxPool3d => {
            let (out, arg) = kernels::max_pool_forward(x[0])?;
            Ok((out, Saved::Argmax(arg)))
        }
        Primitive::Upsample2x => {
            let [a, b, c] = x[0].spatial()?;
            none(kernels::upsample_forward(x[0], [2 * a, 2 * b, 2 * c])?)
        }
        Primitive::UpsampleTo { size } => none(kernels::upsample_forward(x[0], *size)?),
        Primitive::Concat { axis } => none(kernels::concat_forward(x, *axis)?),
        Primitive::Slice { axis, start, len } => none(kernels::slice_forward(x[0], *axis, *start, *len)?),
        Primitive::Relu => none(x[0].map(|v| if v > T::zero() { v } else { T::zero() })),
        Primitive::Sigmoid => none(x[0].map(sigmoid)),
        Primitive::Add => {
            let s = broadcast_shape(x[0], x[1], "add")?;
            none(zip_bcast(x[0], x[1], s, |a, b| a + b))
        }
        Primitive::Sub => {
            let s = broadcast_shape(x[0], x[1], "sub")?;
            none(zip_bcast(x[0], x[1], s, |a, b| a - b))
        }
        Primitive::Mul => {
            let s = broadcast_shape(x[0], x[1], "mul")?;
            none(zip_bcast(x[0], x[1], s, |a, b| a * b))
        }
        Primitive::Div => {
            let s = broadcast_shape(x[0], x[1], "div")?;
            none(zip_bcast(x[0], x[1], s, |a, b| a / b))
        }
        Primitive::AddScalar(c) => {
            let c = T::from_f64_lossy(*c);
            none(x[0].map(|v| v + c))
        }
        Primitive::MulScalar(c) => {
            let c = T::from_f64_lossy(*c);
            none(x[0].map(|v| v * c))
        }
        Primitive::Pow(p) => {
            let integral = p.fract() == 0.0;
            let p = T::from_f64_lossy(*p);
            none(x[0].map(|v| pow_value(v, p, integral)))
        }
        Primitive::Sum => none(Tensor::scalar(accurate_sum(x[0].data()))),
        Primitive::Mean => {
            let n = T::from_usize(x[0].len()).unwrap();
            none(Tensor::scalar(accurate_sum(x[0].data()) / n))
        }
        Primitive::BatchSum => {
            let nb = x[0].shape()[0];
            let per = x[0].len() / nb;
            let sums = x[0].data().chunks(per).map(accurate_sum).collect();
            none(Tensor::from_parts(vec![nb], sums))
        }
        Primitive::Gather { indices, shape } => {
            let n: usize = shape.iter().product();
            if indices.len() != n || shape.is_empty() || n == 0 {
                return Err(Error::ShapeMismatch(format!("gather: {} indices for output shape {shape:?}", indices.len())));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= x[0].len()) {
                return Err(Error::ShapeMismatch(format!("gather index {bad} out of range for {} elements", x[0].len())));
            }
            let d = x[0].data();
            none(Tensor::from_parts(shape.clone(), indices.iter().map(|&i| d[i]).collect()))
        }
        Primitive::BatchNorm { eps } => {
            let (out, saved) = kernels::batch_norm_forward(x[0], x[1], x[2], T::from_f64_lossy(*eps))?;
            Ok((out, Saved::Norm(saved)))
        }
        Primitive::ChannelAffine => none(kernels::channel_affine_forward(x[0], x[1], x[2])?),
    }
}

fn backward_rule<T: Real>(
    prim: &Primitive,
    x: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape().to_vec(), data);
    let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| like(a, a.data().iter().zip(g.data()).map(|(&v, &gv)| f(v, gv)).collect());
    match prim {
        Primitive::Conv3d { padding, stride } => {
            let geom = ConvGeom::new(x[0].shape(), x[1].shape(), x[2].shape(), *stride, *padding).expect("validated in forward");
            let (dx, dw, db) = kernels::conv3d_backward(x[0], x[1], g, &geom, needs[0]);
            vec![dx, Some(dw), Some(db)]
        }
        Primitive::MaxPool3d => {
            let Saved::Argmax(arg) = saved else { unreachable!() };
            let mut dx = vec![T::zero(); x[0].len()];
            for (&i, &gv) in arg.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![Some(like(x[0], dx))]
        }
        Primitive::Upsample2x | Primitive::UpsampleTo { .. } => vec![Some(kernels::upsample_backward(x[0].shape(), g))],
        Primitive::Concat { axis } => {
            let mut start = 0;
            x.iter()
                .map(|t| {
                    let len = t.shape()[*axis];
                    let part = kernels::slice_forward(g, *axis, start, len).expect("concat layout");
                    start += len;
                    Some(part)
                })
                .collect()
        }
        Primitive::Slice { axis, start, .. } => vec![Some(kernels::slice_backward(x[0].shape(), *axis, *start, g))],
        // subgradient at exactly 0 is 0
        Primitive::Relu => vec![Some(zip(x[0], &|v, gv| if v > T::zero() { gv } else { T::zero() }))],
        Primitive::Sigmoid => vec![Some(zip(out, &|s, gv| gv * s * (T::one() - s)))],
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let n = g.len();
            let a = |i: usize| if x[0].len() == 1 { x[0].data()[0] } else { x[0].data()[i] };
            let b = |i: usize| if x[1].len() == 1 { x[1].data()[0] } else { x[1].data()[i] };
            let full = |f: &dyn Fn(usize) -> T| Tensor::from_parts(g.shape().to_vec(), (0..n).map(f).collect());
            let gd = g.data();
            let (ga, gb) = match prim {
                Primitive::Add => (full(&|i| gd[i]), full(&|i| gd[i])),
                Primitive::Sub => (full(&|i| gd[i]), full(&|i| -gd[i])),
                Primitive::Mul => (full(&|i| gd[i] * b(i)), full(&|i| gd[i] * a(i))),
                _ => (full(&|i| gd[i] / b(i)), full(&|i| -gd[i] * a(i) / (b(i) * b(i)))),
            };
            vec![needs[0].then(|| unbroadcast(ga, x[0].shape())), needs[1].then(|| unbroadcast(gb, x[1].shape()))]
        }
        Primitive::AddScalar(_) => vec![Some(g.clone())],
        Primitive::MulScalar(c) => {
            let c = T::from_f64_lossy(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Primitive::Pow(p) => {
            let integral = p.fract() == 0.0;
            let pt = T::from_f64_lossy(*p);
            let pm1 = T::from_f64_lossy(p - 1.0);
            vec![Some(zip(x[0], &|v, gv| {
                if *p == 0.0 || (!integral && v <= T::zero()) {
                    T::zero()
                } else {
                    gv * pt * pow_value(v, pm1, integral)
                }
            }))]
        }
        Primitive::Sum => vec![Some(Tensor::full(x[0].shape(), g.item()))],
        Primitive::Mean => {
            let n = T::from_usize(x[0].len()).unwrap();
            vec![Some(Tensor::full(x[0].shape(), g.item() / n))]
        }
        Primitive::BatchSum => {
            let per = x[0].len() / x[0].shape()[0];
            let data = (0..x[0].len()).map(|i| g.data()[i / per]).collect();
            vec![Some(like(x[0], data))]
        }
        Primitive::Gather { indices, .. } => {
            let mut dx = vec![T::zero(); x[0].len()];
            for (&i, &gv) in indices.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![Some(like(x[0], dx))]
        }
        Primitive::BatchNorm { .. } => {
            let Saved::Norm(s) = saved else { unreachable!() };
            let (dx, dg, db) = kernels::batch_norm_backward(x[0].shape(), x[1], s, g);
            vec![Some(dx), Some(dg), Some(db)]
        }
        Primitive::ChannelAffine => {
            let (dx, ds, dt) = kernels::channel_affine_backward(x[0], x[1], g);
            vec![Some(dx), Some(ds), Some(dt)]
        }
    }
}
