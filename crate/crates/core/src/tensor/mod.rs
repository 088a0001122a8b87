//! Dense 4-D tensors and the reverse-mode tape built on top of them.
//!
//! Every tensor is laid out as `(N, C, H, W)` in row-major order. Vectors
//! and scalars are carried as `(N, C, 1, 1)` and `(1, 1, 1, 1)` so that the
//! whole crate speaks a single shape vocabulary.

pub(crate) mod kernels;
mod tape;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use kernels::{conv2d_real, conv_output_size, pad_constant};
pub use tape::{BinaryConvPath, BnMode, RunningStats, SignMode, Tape, Var, BN_EPS, BN_MOMENTUM, NORM_DELTA};

/// `(N, C, H, W)`.
pub type Shape = [usize; 4];

/// A dense single-precision tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &Shape) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::config(format!("tensor shape {shape:?} has a zero-sized axis")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        if data.len() != numel(&shape) {
            return Err(Error::config(format!(
                "tensor shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Per-channel vector stored as `(1, C, 1, 1)`.
    pub fn channel_vector(values: Vec<f32>) -> Self {
        Tensor {
            shape: [1, values.len(), 1, 1],
            data: values,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..numel(&shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Tensor { shape, data }
    }

    /// Uniform ±1 tensor.
    pub fn random_sign<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, at: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((at[0] * c + at[1]) * h + at[2]) * w + at[3]
    }

    pub fn at(&self, at: [usize; 4]) -> f32 {
        self.data[self.index(at)]
    }

    pub fn set(&mut self, at: [usize; 4], value: f32) {
        let i = self.index(at);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        check_shape(&shape)?;
        if numel(&shape) != self.data.len() {
            return Err(Error::config(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Samples `[n0, n0 + count)` along the batch axis.
    pub fn batch_slice(&self, n0: usize, count: usize) -> Tensor {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [count, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n0 * per..(n0 + count) * per].to_vec(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
