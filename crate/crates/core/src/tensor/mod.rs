//! Dense row-major tensors and the handful of kernels the adapter needs.
//!
//! Storage is generic over [`Scalar`] so the same forward and backward code
//! runs in `f32` for training and in `f64` for gradient checking. Reductions
//! accumulate in `f64` regardless of the storage type.

mod tape;

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub use tape::{backward, Gradients, Tape, Var};

/// Layer-norm epsilon used everywhere in the engine.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Matmuls with more multiply-adds than this fan out over rows.
const PAR_MATMUL_THRESHOLD: usize = 1 << 15;

pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Degenerate(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `1 × n` row.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", &[cols], &[bad.len()]));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.len() {
        1 => Ok((1, t.shape[0])),
        2 => Ok((t.shape[0], t.shape[1])),
        _ => Err(Error::dim(op, &t.shape, &[])),
    }
}

/// Standard matrix product of an `m × k` and a `k × n` tensor.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 || b.shape.len() != 2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    let kernel = |i: usize, row: &mut [T]| {
        let lhs = &a.data[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (p, x) in lhs.iter().enumerate() {
                acc += x.as_f64() * b.data[p * n + j].as_f64();
            }
            *slot = T::from_f64(acc);
        }
    };
    if m * n * k >= PAR_MATMUL_THRESHOLD {
        par::fill_rows(&mut out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| kernel(i, row));
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax, stabilized by subtracting each row's max.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (slot, e) in row.iter_mut().zip(exps) {
            *slot = T::from_f64(e / total);
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Per-row statistics kept by [`layer_norm_with_stats`] for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T: Scalar> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
}

/// Normalize every row of the last axis to mean 0 / variance 1, then apply
/// `gain` and `bias`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", &x.shape, &gain.shape));
    }
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for (r, row) in x.data.chunks(d).enumerate() {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c].as_f64() - mean) * inv;
            xhat[r * d + c] = T::from_f64(h);
            out[r * d + c] = T::from_f64(h * gain.data[c].as_f64() + bias.data[c].as_f64());
        }
    }
    let y = Tensor {
        shape: x.shape.clone(),
        data: out,
    };
    Ok((y, NormStats { xhat, inv_std }))
}
