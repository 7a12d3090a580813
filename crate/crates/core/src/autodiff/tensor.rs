use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Scalar precision of tensors: `f64` for verification, `f32` for training.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    const DTYPE: DType;

    /// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    /// `ta`/`tb` read `a`/`b` transposed from their stored `k×m` / `n×k` layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // element (i, j) of the logical matrix
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
            if m == 0 || n == 0 {
                return;
            }
            let (rsa, csa) = strides(m, k, ta);
            let (rsb, csb) = strides(k, n, tb);
            // SAFETY: bounds asserted above; strides describe the stored layouts.
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    gemm_impl!(f32, matrixmultiply::sgemm);

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    gemm_impl!(f64, matrixmultiply::dgemm);

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense tensor of rank 1 to 5.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 5 || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("tensor shape must have rank 1..=5 with positive extents, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} holds {n} values, data has {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial extents `(x, y, z)` of a rank-5 tensor.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        if self.shape.len() != 5 {
            return Err(Error::ShapeMismatch(format!("expected rank-5 (batch, channel, x, y, z), got {:?}", self.shape)));
        }
        Ok([self.shape[2], self.shape[3], self.shape[4]])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}
