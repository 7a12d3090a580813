//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every primitive applied to its nodes
//! stores the output value and, when some input requires a gradient, the
//! record needed to run it backwards. [`Graph::backward`] walks the tape in
//! reverse creation order and sums gradients over all paths.
//!
//! Rank-5 tensors use the layout `(batch, channel, x, y, z)` with the spatial
//! block of each `(batch, channel)` pair stored x-fastest, matching
//! [`crate::volume::Volume3D`]. Batch and channel are the outermost strides,
//! so slicing along either is a contiguous copy.

mod conv3;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, Primitive};
pub use tensor::{DType, Real, Tensor};
