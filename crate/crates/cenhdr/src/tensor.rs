//! Rank-4 NCHW tensors backed by a flat row-major buffer.
//!
//! Every kernel in this crate operates on `(batch, channels, height, width)`
//! tensors; vectors are modeled as `(n, c, 1, 1)`. Production code runs on
//! `f32` storage, while gradient checks instantiate the same generic kernels
//! with `f64`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
///
/// Reductions (convolution, pooling, losses) accumulate in `f64` regardless
/// of the storage type, so `from_f64`/`to_f64` are on the hot path.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline(always)]
    fn zero() -> Self {
        0.0
    }
    #[inline(always)]
    fn one() -> Self {
        1.0
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline(always)]
    fn zero() -> Self {
        0.0
    }
    #[inline(always)]
    fn one() -> Self {
        1.0
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// The four NCHW extents of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of a scalar node.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Errors raised by tensor constructors and kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength {
        op: &'static str,
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {axis} mismatch, expected {expected} but got {got}")]
    AxisMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shapes {left} and {right} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: kernel size {k} must be odd")]
    EvenKernel { op: &'static str, k: usize },
    #[error("{op}: {param} must be >= {min}, got {got}")]
    BadParameter {
        op: &'static str,
        param: &'static str,
        min: usize,
        got: usize,
    },
    #[error("{op}: output spatial extent would be empty for input {shape}")]
    EmptyOutput { op: &'static str, shape: Shape },
    #[error("{op}: input has no elements")]
    EmptyInput { op: &'static str },
    #[error("{op}: {axis} ({got}) not divisible by {divisor}")]
    NotDivisible {
        op: &'static str,
        axis: &'static str,
        got: usize,
        divisor: usize,
    },
    #[error("{op}: negative input value {value} at flat index {index}")]
    NegativeInput {
        op: &'static str,
        value: f64,
        index: usize,
    },
    #[error("backward: loss node has shape {shape}, expected a scalar (1, 1, 1, 1)")]
    LossNotScalar { shape: Shape },
    #[error("no gradient recorded for parameter `{name}`")]
    MissingGradient { name: String },
}

/// A dense rank-4 tensor. Data is row-major: `w` fastest, then `h`, `c`, `n`.
#[derive(Clone, PartialEq)]
pub struct TensorOf<T> {
    shape: Shape,
    data: Vec<T>,
}

/// The crate-wide storage type: 32-bit IEEE-754 floats.
pub type Tensor = TensorOf<f32>;

impl<T: Element> TensorOf<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                op: "Tensor::new",
                shape,
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(TensorOf { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        TensorOf {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        TensorOf {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        TensorOf { shape, data }
    }

    /// A `(1, 1, 1, 1)` tensor holding one value.
    pub fn scalar(value: T) -> Self {
        TensorOf {
            shape: Shape::scalar(),
            data: vec![value],
        }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn scalar_value(&self) -> Option<T> {
        if self.shape == Shape::scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// One `(h, w)` plane of the tensor as a slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    /// Element-type conversion, used to lift `f32` weights into `f64` checks.
    pub fn cast<U: Element>(&self) -> TensorOf<U> {
        TensorOf {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorOf {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for TensorOf<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}
