//! Dense tensors with a small reverse-mode autodiff engine.
//!
//! The engine is deliberately narrow: it knows the handful of layer types the
//! stereo codec and its task head are built from (strided and transposed
//! convolutions, channel concat/narrow, leaky ReLU, a few reductions and the
//! loss/rate kernels) and nothing else. There is no broadcasting.
//!
//! Tensors are generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod loss_kernels;
mod optim;
mod param;
pub mod prior_math;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Result};

pub use graph::{round_half_even, Graph, Var};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
    // Pure-Rust versions that give the same bits on every platform; the
    // coding tables depend on them.
    fn portable_exp(self) -> Self;
    fn portable_ln(self) -> Self;
    fn portable_ln_1p(self) -> Self;
    fn portable_tanh(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn portable_exp(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn portable_ln(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn portable_ln_1p(self) -> Self {
        libm::log1pf(self)
    }
    #[inline]
    fn portable_tanh(self) -> Self {
        libm::tanhf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn portable_exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn portable_ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn portable_ln_1p(self) -> Self {
        libm::log1p(self)
    }
    #[inline]
    fn portable_tanh(self) -> Self {
        libm::tanh(self)
    }
}

/// Dense row-major N-dimensional array. Image-like tensors use the
/// `[batch, channels, height, width]` layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} elements, got {}", shape, n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Interprets the shape as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err!("expected a 4-d tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [n, ca, h, w] = a.dims4()?;
        let [nb, cb, hb, wb] = b.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err!(
                "channel concat needs matching N/H/W, got {:?} and {:?}",
                a.shape,
                b.shape
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(Self {
            shape: vec![n, ca + cb, h, w],
            data,
        })
    }

    /// Channels `[start, start + len)` of a `[N, C, H, W]` tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims4()?;
        if len == 0 || start + len > c {
            return Err(shape_err!(
                "channel range {}..{} out of bounds for {} channels",
                start,
                start + len,
                c
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            shape: vec![n, len, h, w],
            data,
        })
    }

    /// Stacks equally shaped `[1, C, H, W]` tensors along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack an empty list"))?;
        let [_, c, h, w] = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data,
        })
    }

    /// Sample `index` of a `[N, C, H, W]` tensor as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims4()?;
        if index >= n {
            return Err(shape_err!("batch index {} out of range {}", index, n));
        }
        let sz = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[index * sz..(index + 1) * sz].to_vec(),
        })
    }
}

/// Splits `[N, C, H, W]` into channels `[0, c1)` and `[c1, C)`.
pub fn channel_split<T: Real>(x: &Tensor<T>, c1: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, c, _, _] = x.dims4()?;
    if c1 == 0 || c1 >= c {
        return Err(crate::Error::Argument(format!(
            "split point {c1} must satisfy 0 < c1 < {c}"
        )));
    }
    Ok((x.narrow_channels(0, c1)?, x.narrow_channels(c1, c - c1)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 3, 3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 5, 3, 3], |i| -(i as f32));
        let ab = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[2, 7, 3, 3]);
        let (a2, b2) = channel_split(&ab, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn split_rejects_out_of_range() {
        let x = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
        assert!(matches!(channel_split(&x, 0), Err(crate::Error::Argument(_))));
        assert!(matches!(channel_split(&x, 4), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1, 2, 3, 4]);
        assert!(matches!(Tensor::concat_channels(&a, &b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }
}
