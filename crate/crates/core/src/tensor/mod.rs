//! Dense row-major tensors, a small taped graph for reverse-mode gradients,
//! and a finite-difference oracle to check them.
//!
//! Feature maps are stored height x width x channels (HWC). Convolution
//! weights are `[k, k, c_in, c_out]`.

mod gradcheck;
mod graph;
pub mod io;
pub mod kernels;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Grads, Graph, Var};

/// Floating point element type. Training runs in `f32`; gradient checks
/// re-run the same graph in `f64`.
pub trait Scalar: Float + NumAssign + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Caller guarantees `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(height, width, channels)` of a rank-3 map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(
                "hwc",
                format!("expected a rank-3 map, got {:?}", self.shape),
            )),
        }
    }

    /// Element of a rank-3 map.
    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> T {
        let w = self.shape[1];
        let ch = self.shape[2];
        self.data[(i * w + j) * ch + c]
    }

    /// Concatenates rank-3 maps of equal spatial size along channels.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let (h, w, _) = first.hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("spatial {:?} vs {:?}", p.shape, first.shape),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Ok(Self::from_parts(vec![h, w, total], data))
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        let (h, w, c) = self.hwc()?;
        if widths.iter().sum::<usize>() != c || widths.contains(&0) {
            return Err(Error::shape(
                "split",
                format!("widths {widths:?} do not partition {c} channels"),
            ));
        }
        let mut out: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(h * w * k)).collect();
        for px in 0..h * w {
            let mut off = px * c;
            for (dst, &k) in out.iter_mut().zip(widths) {
                dst.extend_from_slice(&self.data[off..off + k]);
                off += k;
            }
        }
        Ok(out
            .into_iter()
            .zip(widths)
            .map(|(d, &k)| Self::from_parts(vec![h, w, k], d))
            .collect())
    }
}
