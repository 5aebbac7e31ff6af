//! Dense N×C×H×W tensors and the differentiable operation set built on them.

mod kernels;

pub mod autodiff;
pub mod gradcheck;
pub mod optim;

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use kernels::{area_resize, avg_pool, ConvGeometry};

/// Four-extent shape: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Row-major NCHW array, W fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>({:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if [shape.n, shape.c, shape.h, shape.w].contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.numel() > 0, "zero extent in {shape}");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Single H×W plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &self.data[off..off + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_tensor(&self, n: usize) -> Tensor<T> {
        Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.sample(n).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.expect_shape(other.shape, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_shape(&self, shape: Shape, op: &'static str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, format!("expected {shape}, got {}", self.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp01(&self) -> Tensor<T> {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Converts element type (e.g. f32 images to f64 for oracle checks).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::shape("stack", format!("{} vs {}", s, first.shape)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..first.shape },
            data,
        })
    }

    /// Spatial crop `[y, y+h) × [x, x+w)` of every plane.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        if h == 0 || w == 0 || y + h > self.shape.h || x + w > self.shape.w {
            return Err(Error::shape(
                "crop",
                format!("window {h}x{w} at ({y},{x}) outside {}", self.shape),
            ));
        }
        let shape = self.shape.with_hw(h, w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                let p = self.plane(n, c);
                for r in y..y + h {
                    data.extend_from_slice(&p[r * self.shape.w + x..r * self.shape.w + x + w]);
                }
            }
        }
        Ok(Tensor { shape, data })
    }
}
