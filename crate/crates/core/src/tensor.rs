//! Dense row-major binary64 tensors.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Dense N-dimensional array stored row-major. Feature maps use `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches and
    /// non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
                index,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` for rank-4 tensors.
    pub fn dims4(&self, op: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(op, format!("expected [N,C,H,W], got {:?}", self.shape))),
        }
    }

    /// `(N, D)` for rank-2 tensors.
    pub fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [n, d] => Ok((n, d)),
            _ => Err(Error::dim(op, format!("expected [N,D], got {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} cannot be viewed as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// One sample of a batched tensor as a flat slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[i * per..(i + 1) * per]
    }

    /// Stacks equally-shaped samples along a new leading batch axis.
    pub fn stack(samples: &[&[f64]], sample_shape: &[usize]) -> Result<Tensor> {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::dim("stack", format!("sample of {} elements, expected {per}", s.len())));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Tensor::new(shape, data)
    }
}

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invariant("convolution stride must be positive".into()));
        }
        Ok(ConvSpec { stride, padding })
    }

    /// Output extent along one spatial axis.
    pub fn output_dim(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kernel} does not fit input {input} with padding {}",
                    self.padding
                ),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}
