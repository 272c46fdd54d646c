//! Largest singular value of implicit linear operators by power iteration.

use crate::error::Result;
use crate::ops;
use crate::tensor::{ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;
const START_SEED: u64 = 0x5eed_0001;

/// A linear map known only through its action and its adjoint's action.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

/// A dense `[M, D]` matrix.
pub struct DenseOperator<'a> {
    matrix: &'a Tensor,
    rows: usize,
    cols: usize,
}

impl<'a> DenseOperator<'a> {
    pub fn new(matrix: &'a Tensor) -> Result<Self> {
        let (rows, cols) = matrix.dims2("dense operator")?;
        Ok(DenseOperator { matrix, rows, cols })
    }
}

impl LinearOperator for DenseOperator<'_> {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        ops::gemm(self.rows, self.cols, 1, self.matrix.data(), (self.cols, 1), x, (1, 1), 0.0, &mut y, (1, 1));
        y
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        ops::gemm(self.cols, self.rows, 1, self.matrix.data(), (1, self.cols), y, (1, 1), 0.0, &mut x, (1, 1));
        x
    }
}

/// A bias-free convolution viewed as a linear map at a fixed `[C, H, W]` input shape.
pub struct ConvOperator<'a> {
    kernel: &'a Tensor,
    spec: ConvSpec,
    input_shape: [usize; 3],
    output_len: usize,
}

impl<'a> ConvOperator<'a> {
    pub fn new(kernel: &'a Tensor, spec: ConvSpec, input_shape: [usize; 3]) -> Result<Self> {
        let [c, h, w] = input_shape;
        let probe = ops::conv2d(&Tensor::zeros(&[1, c, h, w]), kernel, None, spec)?;
        Ok(ConvOperator {
            kernel,
            spec,
            input_shape,
            output_len: probe.len(),
        })
    }

    fn batched_input_shape(&self) -> Vec<usize> {
        let [c, h, w] = self.input_shape;
        vec![1, c, h, w]
    }
}

impl LinearOperator for ConvOperator<'_> {
    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn output_len(&self) -> usize {
        self.output_len
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let xt = Tensor::from_parts(self.batched_input_shape(), x.to_vec());
        ops::conv2d(&xt, self.kernel, None, self.spec)
            .expect("shape validated at construction")
            .into_data()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let xt = Tensor::zeros(&self.batched_input_shape());
        let probe = ops::conv2d(&xt, self.kernel, None, self.spec).expect("shape validated at construction");
        let gy = Tensor::from_parts(probe.shape().to_vec(), y.to_vec());
        ops::conv2d_backward(&xt, self.kernel, self.spec, &gy, true)
            .expect("shape validated at construction")
            .input
            .expect("input gradient requested")
            .into_data()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Power iteration on `AᵀA` from a fixed seeded start vector.
///
/// Stops after `iters` iterations or once successive estimates differ by less
/// than `tol` relative to the current one. Returns 0 for the zero operator.
pub fn spectral_norm(op: &dyn LinearOperator, iters: usize, tol: f64) -> f64 {
    let iters = iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut x: Vec<f64> = (0..op.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = norm(&x);
    if n0 == 0.0 {
        return 0.0;
    }
    x.iter_mut().for_each(|v| *v /= n0);

    let mut estimate = 0.0;
    for _ in 0..iters {
        let y = op.apply(&x);
        let sigma = norm(&y);
        if sigma == 0.0 {
            return 0.0;
        }
        let previous = estimate;
        estimate = sigma;
        if (sigma - previous).abs() < tol * sigma {
            break;
        }
        let z = op.apply_transpose(&y);
        let nz = norm(&z);
        if nz == 0.0 {
            break;
        }
        x = z.into_iter().map(|v| v / nz).collect();
    }
    estimate
}

/// Spectral norm of a dense matrix with the default iteration budget.
pub fn matrix_spectral_norm(m: &Tensor) -> Result<f64> {
    Ok(spectral_norm(&DenseOperator::new(m)?, DEFAULT_ITERS, DEFAULT_TOL))
}
