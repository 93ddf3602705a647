use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scalar element type for tensors and the autodiff tape. f32 is the working
/// precision, f64 exists for gradient verification.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;
}

impl Element for f32 {
    fn from_real(v: f64) -> Self {
        v as f32
    }
    fn to_real(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_real(v: f64) -> Self {
        v
    }
    fn to_real(self) -> f64 {
        self
    }
}

/// Extents of a rank-4 tensor in (batch, channels, height, width) order.
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

    /// Flat offset of (n, c, h, w) in row-major order. Callers guarantee
    /// the coordinates are in range.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor, row-major over (N, C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor { shape, data: vec![T::zero(); shape.numel()], requires_grad: false }
    }

    pub fn filled(shape: Shape, value: T) -> Tensor<T> {
        Tensor { shape, data: vec![value; shape.numel()], requires_grad: false }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("buffer of {} values cannot fill shape {}", data.len(), shape),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    /// Samples every value from N(0, std^2). Used for weight initialization.
    pub fn gaussian(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor<T> {
        let normal = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let data = (0..shape.numel()).map(|_| T::from_real(normal.sample(rng))).collect();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Tensor<T> {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
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

    /// Checked element access.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> Result<T> {
        let s = self.shape;
        let checks =
            [("batch", n, s.n), ("channels", c, s.c), ("height", h, s.h), ("width", w, s.w)];
        for (axis, idx, len) in checks {
            if idx >= len {
                return Err(Error::Dimension {
                    axis,
                    detail: format!("index {idx} out of range for extent {len}"),
                });
            }
        }
        Ok(self.data[s.offset(n, c, h, w)])
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) -> Result<()> {
        let s = self.shape;
        if n >= s.n || c >= s.c || h >= s.h || w >= s.w {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("index ({n}, {c}, {h}, {w}) out of range for shape {s}"),
            });
        }
        self.data[s.offset(n, c, h, w)] = value;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }

    pub fn convert<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_real(v.to_real())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Sum of elementwise products. Both tensors must have the same shape.
    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("dot of {} against {}", self.shape, other.shape),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }
}

/// Stacks single-image tensors (1, C, H, W) into one batch (m, C, H, W).
pub fn stack_batch<T: Element>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Contract("stack_batch requires at least one image".into()));
    }
    let first = images[0].shape();
    if first.n != 1 {
        return Err(Error::Dimension {
            axis: "batch",
            detail: format!("stack_batch expects single-image tensors, got batch {}", first.n),
        });
    }
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("cannot stack {} with {}", img.shape(), first),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(Shape::new(images.len(), first.c, first.h, first.w), data)
}
