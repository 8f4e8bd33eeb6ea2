//! Dense NCHW tensors, the forward kernels the detector needs, and a
//! reverse-mode tape over exactly those kernels.

mod gradcheck;
mod io;
pub mod kernels;
mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use io::{encoded_len, read_tensor, write_tensor, DType, TENSOR_MAGIC, TENSOR_VERSION};
pub use kernels::{ActivationKind, ConvSpec, NormKind, PoolKind};
pub use tape::{Gradients, Tape, Var};

/// Four-dimensional extent in (batch, channels, rows, cols) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous row-major (N, C, H, W) array of `f64`.
///
/// Gradients live on the [`Tape`] rather than on the tensor itself; a tensor
/// is a plain value that can be moved between threads freely.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(shape_err(format!("all dimensions must be >= 1, got {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(shape_err(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.is_valid(), "invalid shape {shape}");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        assert!(shape.is_valid(), "invalid shape {shape}");
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let o = self.shape.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() || !shape.is_valid() {
            return Err(shape_err(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Copy of sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.hw();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(shape_err(format!(
                    "cannot stack {} with {}",
                    t.shape, s
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, s.c, s.h, s.w), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
