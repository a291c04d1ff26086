//! Dense tensors and the handful of differentiable operations the pairwise
//! network needs.
//!
//! Activations use a planar batch layout `[batch, channels, height, width]`;
//! every operation has a forward and an explicit backward routine, and the
//! layer structs in this module own their parameters together with the
//! gradient buffers that the backward pass accumulates into.

mod activation;
mod checkpoint;
mod conv;
mod dense;
mod norm;
mod pool;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

pub use activation::{relu, relu_backward, relu_in_place, softmax_rows};
pub(crate) use activation::relu_backward_in_place;
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedArray, CHECKPOINT_VERSION};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvGrads};
pub use dense::{dense, dense_backward, Dense};
pub use norm::{BatchNorm, NormCache, BN_EPSILON, BN_MOMENTUM};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};

/// Scalar type the network can be evaluated in.
///
/// `f32` is the working precision; `f64` exists so gradient checks can run
/// with finite differences that are not swamped by rounding.
pub trait Real:
    Float + Default + Debug + Sum + Send + Sync + std::ops::AddAssign + std::ops::MulAssign + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Round through IEEE half precision (storage emulation).
    fn round_half(self) -> Self;

    /// `c = alpha * a·b + beta * c` for row/column-strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $sa:expr, $b:expr, $sb:expr, $c:expr, $sc:expr) => {
        debug_assert!($m == 0 || $k == 0 || max_offset($m, $k, $sa) < $a.len());
        debug_assert!($k == 0 || $n == 0 || max_offset($k, $n, $sb) < $b.len());
        debug_assert!($m == 0 || $n == 0 || max_offset($m, $n, $sc) < $c.len());
    };
}

fn max_offset(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    ((rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1) as usize
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn round_half(self) -> Self {
        half::f16::from_f32(self).to_f32()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        beta: Self,
        c: &mut [Self],
        sc: (isize, isize),
    ) {
        gemm_bounds!(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: the strides describe matrices that lie inside the slices
        // (checked above in debug builds, guaranteed by every caller).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                sc.0,
                sc.1,
            )
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn round_half(self) -> Self {
        half::f16::from_f64(self).to_f64()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        beta: Self,
        c: &mut [Self],
        sc: (isize, isize),
    ) {
        gemm_bounds!(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                sc.0,
                sc.1,
            )
        }
    }
}

/// Storage precision of activations.
///
/// `Half` rounds every stored activation through f16 while all arithmetic
/// and accumulation stays in the working type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Full,
    Half,
}

impl Precision {
    pub fn apply<T: Real>(self, data: &mut [T]) {
        if self == Precision::Half {
            data.iter_mut().for_each(|v| *v = v.round_half());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform in `±bound`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// A learnable tensor paired with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub(crate) fn accumulate(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += *d;
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[cfg(test)]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn half_storage_rounds() {
        let mut v = vec![1.0f32 + 1e-4, 0.1];
        Precision::Half.apply(&mut v);
        assert_eq!(v[0], 1.0);
        assert_ne!(v[1], 0.1);
        let mut w = vec![0.1f32];
        Precision::Full.apply(&mut w);
        assert_eq!(w[0], 0.1);
    }

    #[test]
    fn gemm_small_product() {
        // [1 2; 3 4] * [5; 6] = [17; 39]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0];
        let mut c = [0.0f32; 2];
        f32::gemm(2, 2, 1, 1.0, &a, (2, 1), &b, (1, 1), 0.0, &mut c, (1, 1));
        assert_eq!(c, [17.0, 39.0]);
    }
}
