//! Dense 4-D tensors in NCHW layout.
//!
//! Everything persisted is `f32`; gradient-verification tests replay the same
//! graphs in `f64`, so the element type is abstracted behind [`Elem`].

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt;
use std::ops::AddAssign;

/// Scalar element type for tensors: `f32` for training/inference, `f64` for
/// high-precision replays in gradient checks.
pub trait Elem: Float + AddAssign + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of a 4-D tensor: (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of (n, c, h, w) in row-major NCHW order.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Elements per image (c*h*w).
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor. Lower-rank data (biases, BN parameters, scalars) uses
/// degenerate dimensions, e.g. a per-channel vector is 1xCx1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

pub type Tensor4 = Tensor<f32>;

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: Shape) -> Tensor<E> {
        Tensor {
            shape,
            data: vec![E::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape, v: E) -> Tensor<E> {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Tensor<E>> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: E) -> Tensor<E> {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: E) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Value of a 1-element tensor.
    pub fn scalar_value(&self) -> E {
        assert_eq!(self.numel(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    /// Slice holding image `n`.
    pub fn image(&self, n: usize) -> &[E] {
        let len = self.shape.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [E] {
        let len = self.shape.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Convert between element types (f32 <-> f64).
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| F::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn min_value(&self) -> E {
        self.data.iter().copied().fold(E::infinity(), E::min)
    }

    pub fn max_value(&self) -> E {
        self.data.iter().copied().fold(E::neg_infinity(), E::max)
    }

    /// True when every element is finite. A single pass summing in f64 is
    /// enough: NaN/Inf poison the sum.
    pub fn all_finite(&self) -> bool {
        let mut acc = 0.0f64;
        for &x in &self.data {
            acc += x.as_f64();
        }
        acc.is_finite()
    }

    /// Debug-build guard: forward/backward passes must never produce NaN/Inf.
    #[inline]
    pub fn debug_assert_finite(&self, ctx: &str) {
        debug_assert!(self.all_finite(), "non-finite values after {ctx}");
    }
}
