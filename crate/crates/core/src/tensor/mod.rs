//! Dense rank-4 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor4`] is the value type (64-bit floats, row-major `(n, c, h, w)`).
//! All network math runs through a [`Tape`], which records each operation
//! and replays them in reverse to produce gradients. The op set is exactly
//! what the counting network needs: convolution, pooling, bilinear
//! upsampling, channel concat, ReLU/sigmoid, and a sum-of-squares loss.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod sgd;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, gradient_check_at};
pub use sgd::SgdMomentum;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use std::fmt;

/// Shape of a rank-4 tensor: `(batch, channels, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of `(n, c, y, x)` in row-major `(n, c, h, w)` order.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor of 64-bit floats.
///
/// Leaves carry `requires_grad`; after a backward pass the tape writes the
/// accumulated gradient back through [`Tape::grad`], and optimizer code
/// stores it in [`Tensor4::grad`]. All entries are finite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    /// Build a tensor, rejecting length mismatches and non-finite entries.
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "Tensor4::new",
                left: shape.to_string(),
                right: format!("data length {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor4::new"));
        }
        Ok(Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Result<Self> {
        Tensor4::new(shape, vec![value; shape.numel()])
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
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
        Tensor4::new(shape, data)
    }

    /// Zero-mean normal entries with the given standard deviation (Box-Muller).
    pub fn randn(shape: Shape4, std: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        while data.len() < shape.numel() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            data.push(r * c * std);
            if data.len() < shape.numel() {
                data.push(r * s * std);
            }
        }
        Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add a gradient contribution (same shape), allocating on first use.
    pub fn accumulate_grad(&mut self, contrib: &[f64]) -> Result<()> {
        if contrib.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.to_string(),
                right: format!("gradient length {}", contrib.len()),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Take the gradient out, leaving none behind.
    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }
}
