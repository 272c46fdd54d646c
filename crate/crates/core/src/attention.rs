//! Channel-attention bodies and the attention-alike re-parameterization path.
//!
//! A body maps a pooled descriptor `u` to a per-channel vector
//! `v = sigmoid(F_theta(u))`. The standard path pools `u` from the feature map;
//! the ASR path feeds the body a learnable constant `psi` instead, so `v` no
//! longer depends on the input and can later be folded into a neighbouring
//! layer.

use crate::error::{Error, Result};
use crate::graph::PositionTag;
use crate::ops::{self, sigmoid_scalar};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Default constant used to initialize ψ.
pub const DEFAULT_PSI_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AttentionKind {
    /// Squeeze-and-excitation: `sigmoid(W2 relu(W1 u))`, hidden width `C / reduction`.
    Se { reduction: usize },
    /// Instance enhancement: per-channel `sigmoid(gamma * u + beta)`.
    Ie,
    /// Style recalibration: `sigmoid(w_mean * mean + w_std * std)` per channel.
    Srm,
    /// Spatial pyramid pooling head: two-layer MLP over concatenated pyramid pools.
    Spa { levels: Vec<usize>, reduction: usize },
    /// Efficient channel attention: circular 1-D convolution of odd width over channels.
    Eca { kernel: usize },
    /// CBAM channel branch: shared MLP over average- and max-pooled descriptors.
    CbamChannel { reduction: usize },
}

/// How the descriptor `u` is pooled from a feature map in the standard path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pooling<'a> {
    Average,
    MeanStd,
    Pyramid(&'a [usize]),
    AvgMax,
}

impl AttentionKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Se { .. } => "se",
            AttentionKind::Ie => "ie",
            AttentionKind::Srm => "srm",
            AttentionKind::Spa { .. } => "spa",
            AttentionKind::Eca { .. } => "eca",
            AttentionKind::CbamChannel { .. } => "cbam",
        }
    }

    pub fn all_defaults() -> Vec<AttentionKind> {
        vec![
            AttentionKind::Se { reduction: 4 },
            AttentionKind::Ie,
            AttentionKind::Srm,
            AttentionKind::Spa { levels: vec![1, 2, 4], reduction: 4 },
            AttentionKind::Eca { kernel: 3 },
            AttentionKind::CbamChannel { reduction: 4 },
        ]
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let check_reduction = |r: usize| {
            if r == 0 || !channels.is_multiple_of(r) || channels / r == 0 {
                Err(Error::Invariant(format!(
                    "reduction {r} must divide channel count {channels}"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            AttentionKind::Se { reduction } | AttentionKind::CbamChannel { reduction } => {
                check_reduction(*reduction)
            }
            AttentionKind::Spa { levels, reduction } => {
                if levels.is_empty() || levels.contains(&0) {
                    return Err(Error::Invariant("pyramid levels must be non-empty and positive".into()));
                }
                check_reduction(*reduction)
            }
            AttentionKind::Eca { kernel } => {
                if kernel % 2 == 0 {
                    Err(Error::Invariant(format!("ECA kernel {kernel} must be odd")))
                } else {
                    Ok(())
                }
            }
            AttentionKind::Ie | AttentionKind::Srm => Ok(()),
        }
    }

    fn pooling(&self) -> Pooling<'_> {
        match self {
            AttentionKind::Se { .. } | AttentionKind::Ie | AttentionKind::Eca { .. } => Pooling::Average,
            AttentionKind::Srm => Pooling::MeanStd,
            AttentionKind::Spa { levels, .. } => Pooling::Pyramid(levels),
            AttentionKind::CbamChannel { .. } => Pooling::AvgMax,
        }
    }

    /// Length of the pooled descriptor fed to the body in the standard path.
    pub fn pooled_len(&self, channels: usize) -> usize {
        match self.pooling() {
            Pooling::Average => channels,
            Pooling::MeanStd | Pooling::AvgMax => 2 * channels,
            Pooling::Pyramid(levels) => channels * levels.iter().map(|l| l * l).sum::<usize>(),
        }
    }

    /// Length of ψ when the body is driven by a constant input.
    pub fn psi_len(&self, channels: usize) -> usize {
        match self {
            // avg and max descriptors coincide on a constant input: one shared branch
            AttentionKind::CbamChannel { .. } => channels,
            _ => self.pooled_len(channels),
        }
    }

    /// Names and shapes of the body parameters θ, in canonical order.
    pub fn param_shapes(&self, channels: usize) -> Vec<(&'static str, Vec<usize>)> {
        let c = channels;
        match self {
            AttentionKind::Se { reduction } | AttentionKind::CbamChannel { reduction } => {
                let h = c / reduction;
                vec![("w1", vec![h, c]), ("w2", vec![c, h])]
            }
            AttentionKind::Spa { reduction, .. } => {
                let h = c / reduction;
                vec![("w1", vec![h, self.pooled_len(c)]), ("w2", vec![c, h])]
            }
            AttentionKind::Ie => vec![("gamma", vec![c]), ("beta", vec![c])],
            AttentionKind::Srm => vec![("w_mean", vec![c]), ("w_std", vec![c])],
            AttentionKind::Eca { kernel } => vec![("weight", vec![*kernel])],
        }
    }

    /// Seeded initialization of θ.
    pub fn init_params<R: Rng + ?Sized>(&self, channels: usize, rng: &mut R) -> AttentionParams {
        let c = channels;
        let uniform_fan_in = |shape: &[usize], rng: &mut R| {
            let bound = 1.0 / (shape[1] as f64).sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        };
        match self {
            AttentionKind::Se { .. } | AttentionKind::CbamChannel { .. } | AttentionKind::Spa { .. } => {
                let shapes = self.param_shapes(c);
                let w1 = uniform_fan_in(&shapes[0].1, rng);
                let w2 = uniform_fan_in(&shapes[1].1, rng);
                AttentionParams::Mlp { w1, w2 }
            }
            AttentionKind::Ie => AttentionParams::Affine {
                gamma: Tensor::ones(&[c]),
                beta: Tensor::zeros(&[c]),
            },
            AttentionKind::Srm => AttentionParams::Style {
                w_mean: Tensor::ones(&[c]),
                w_std: Tensor::zeros(&[c]),
            },
            AttentionKind::Eca { kernel } => {
                let bound = 1.0 / (*kernel as f64).sqrt();
                AttentionParams::Conv1d {
                    weight: Tensor::uniform(&[*kernel], -bound, bound, rng),
                }
            }
        }
    }
}

/// Body parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    /// Two-layer bias-free MLP (SE, SPA, CBAM).
    Mlp { w1: Tensor, w2: Tensor },
    /// IE per-channel affine.
    Affine { gamma: Tensor, beta: Tensor },
    /// SRM style integration weights.
    Style { w_mean: Tensor, w_std: Tensor },
    /// ECA kernel.
    Conv1d { weight: Tensor },
}

impl AttentionParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            AttentionParams::Mlp { w1, w2 } => vec![w1, w2],
            AttentionParams::Affine { gamma, beta } => vec![gamma, beta],
            AttentionParams::Style { w_mean, w_std } => vec![w_mean, w_std],
            AttentionParams::Conv1d { weight } => vec![weight],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AttentionParams::Mlp { w1, w2 } => vec![w1, w2],
            AttentionParams::Affine { gamma, beta } => vec![gamma, beta],
            AttentionParams::Style { w_mean, w_std } => vec![w_mean, w_std],
            AttentionParams::Conv1d { weight } => vec![weight],
        }
    }

    /// Assembles θ from tensors listed in [`AttentionKind::param_shapes`] order.
    pub fn from_tensors(kind: &AttentionKind, channels: usize, mut tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = kind.param_shapes(channels);
        if tensors.len() != shapes.len() {
            return Err(Error::dim("attention params", format!("{} tensors for {}", tensors.len(), kind.name())));
        }
        for (t, (name, shape)) in tensors.iter().zip(&shapes) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "attention params",
                    format!("{name}: shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        let mut take = || tensors.remove(0);
        Ok(match kind {
            AttentionKind::Se { .. } | AttentionKind::CbamChannel { .. } | AttentionKind::Spa { .. } => {
                AttentionParams::Mlp { w1: take(), w2: take() }
            }
            AttentionKind::Ie => AttentionParams::Affine { gamma: take(), beta: take() },
            AttentionKind::Srm => AttentionParams::Style { w_mean: take(), w_std: take() },
            AttentionKind::Eca { .. } => AttentionParams::Conv1d { weight: take() },
        })
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }
}

/// Saved values of one body evaluation.
#[derive(Debug, Clone)]
pub struct BodyCache {
    input: Vec<f64>,
    hidden_pre: Vec<Vec<f64>>,
    v: Vec<f64>,
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn body_eval(params: &AttentionParams, channels: usize, u: &[f64]) -> Result<(Vec<f64>, BodyCache)> {
    let c = channels;
    let mut hidden_pre = Vec::new();
    let z: Vec<f64> = match params {
        AttentionParams::Mlp { w1, w2 } => {
            let in_dim = w1.shape()[1];
            if u.is_empty() || !u.len().is_multiple_of(in_dim) {
                return Err(Error::dim("attention body", format!("input length {} vs MLP input {in_dim}", u.len())));
            }
            let mut z = vec![0.0; c];
            for branch in u.chunks(in_dim) {
                let h = matvec(w1, branch);
                let a: Vec<f64> = h.iter().map(|&t| ops::relu_scalar(t)).collect();
                for (zi, o) in z.iter_mut().zip(matvec(w2, &a)) {
                    *zi += o;
                }
                hidden_pre.push(h);
            }
            z
        }
        AttentionParams::Affine { gamma, beta } => {
            if u.len() != c {
                return Err(Error::dim("attention body", format!("IE input length {} != {c}", u.len())));
            }
            (0..c).map(|i| gamma.data()[i] * u[i] + beta.data()[i]).collect()
        }
        AttentionParams::Style { w_mean, w_std } => {
            if u.len() != 2 * c {
                return Err(Error::dim("attention body", format!("SRM input length {} != {}", u.len(), 2 * c)));
            }
            (0..c).map(|i| w_mean.data()[i] * u[i] + w_std.data()[i] * u[c + i]).collect()
        }
        AttentionParams::Conv1d { weight } => {
            if u.len() != c {
                return Err(Error::dim("attention body", format!("ECA input length {} != {c}", u.len())));
            }
            let k = weight.len();
            let half = (k / 2) as isize;
            (0..c)
                .map(|i| {
                    (0..k)
                        .map(|j| {
                            let src = (i as isize + j as isize - half).rem_euclid(c as isize) as usize;
                            weight.data()[j] * u[src]
                        })
                        .sum()
                })
                .collect()
        }
    };
    let v: Vec<f64> = z.into_iter().map(sigmoid_scalar).collect();
    Ok((
        v.clone(),
        BodyCache {
            input: u.to_vec(),
            hidden_pre,
            v,
        },
    ))
}

/// Accumulates θ gradients into `grads`; returns the gradient with respect to `u`.
fn body_grad(params: &AttentionParams, cache: &BodyCache, grad_v: &[f64], grads: &mut AttentionParams) -> Vec<f64> {
    let c = cache.v.len();
    let gz: Vec<f64> = grad_v.iter().zip(&cache.v).map(|(g, v)| g * v * (1.0 - v)).collect();
    let u = &cache.input;
    let mut gu = vec![0.0; u.len()];
    match (params, grads) {
        (AttentionParams::Mlp { w1, w2 }, AttentionParams::Mlp { w1: g1, w2: g2 }) => {
            let (hid, in_dim) = (w1.shape()[0], w1.shape()[1]);
            for (b, h) in cache.hidden_pre.iter().enumerate() {
                let branch = &u[b * in_dim..(b + 1) * in_dim];
                let mut ga = vec![0.0; hid];
                for (o, &g) in gz.iter().enumerate().take(c) {
                    for j in 0..hid {
                        let a = ops::relu_scalar(h[j]);
                        g2.data_mut()[o * hid + j] += g * a;
                        ga[j] += w2.data()[o * hid + j] * g;
                    }
                }
                for j in 0..hid {
                    let gh = if h[j] > 0.0 { ga[j] } else { 0.0 };
                    if gh == 0.0 {
                        continue;
                    }
                    for d in 0..in_dim {
                        g1.data_mut()[j * in_dim + d] += gh * branch[d];
                        gu[b * in_dim + d] += w1.data()[j * in_dim + d] * gh;
                    }
                }
            }
        }
        (AttentionParams::Affine { gamma, .. }, AttentionParams::Affine { gamma: gg, beta: gb }) => {
            for i in 0..c {
                gg.data_mut()[i] += gz[i] * u[i];
                gb.data_mut()[i] += gz[i];
                gu[i] = gz[i] * gamma.data()[i];
            }
        }
        (AttentionParams::Style { w_mean, w_std }, AttentionParams::Style { w_mean: gm, w_std: gs }) => {
            for i in 0..c {
                gm.data_mut()[i] += gz[i] * u[i];
                gs.data_mut()[i] += gz[i] * u[c + i];
                gu[i] = gz[i] * w_mean.data()[i];
                gu[c + i] = gz[i] * w_std.data()[i];
            }
        }
        (AttentionParams::Conv1d { weight }, AttentionParams::Conv1d { weight: gw }) => {
            let k = weight.len();
            let half = (k / 2) as isize;
            for (i, &g) in gz.iter().enumerate().take(c) {
                for j in 0..k {
                    let src = (i as isize + j as isize - half).rem_euclid(c as isize) as usize;
                    gw.data_mut()[j] += g * u[src];
                    gu[src] += g * weight.data()[j];
                }
            }
        }
        _ => unreachable!("gradient buffer built from the same parameters"),
    }
    gu
}

/// `v = sigmoid(F_theta(u))` for a single descriptor `u`.
pub fn body_forward(params: &AttentionParams, channels: usize, u: &Tensor) -> Result<Tensor> {
    let (v, _) = body_eval(params, channels, u.data())?;
    Tensor::from_vec(v)
}

/// Region `[start, end)` of adaptive average pooling cell `i` out of `cells`.
fn adaptive_bounds(i: usize, cells: usize, extent: usize) -> (usize, usize) {
    let start = i * extent / cells;
    let end = ((i + 1) * extent).div_ceil(cells);
    (start, end.max(start + 1))
}

fn pool_sample(pooling: Pooling<'_>, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let planes = x.chunks(hw);
    match pooling {
        Pooling::Average => planes.map(|p| p.iter().sum::<f64>() / hw as f64).collect(),
        Pooling::MeanStd => {
            let means: Vec<f64> = x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
            let stds: Vec<f64> = x
                .chunks(hw)
                .zip(&means)
                .map(|(p, m)| (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64).sqrt())
                .collect();
            means.into_iter().chain(stds).collect()
        }
        Pooling::AvgMax => {
            let avg = x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64);
            let max = x.chunks(hw).map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            avg.collect::<Vec<_>>().into_iter().chain(max).collect()
        }
        Pooling::Pyramid(levels) => {
            let mut out = Vec::new();
            for &l in levels {
                for ch in 0..c {
                    let p = &x[ch * hw..(ch + 1) * hw];
                    for ci in 0..l {
                        let (r0, r1) = adaptive_bounds(ci, l, h);
                        for cj in 0..l {
                            let (c0, c1) = adaptive_bounds(cj, l, w);
                            let mut s = 0.0;
                            for r in r0..r1 {
                                s += p[r * w + c0..r * w + c1].iter().sum::<f64>();
                            }
                            out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                        }
                    }
                }
            }
            out
        }
    }
}

fn pool_sample_backward(pooling: Pooling<'_>, x: &[f64], c: usize, h: usize, w: usize, gu: &[f64], gx: &mut [f64]) {
    let hw = h * w;
    let add_mean = |gx: &mut [f64], ch: usize, g: f64| {
        gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d += g / hw as f64);
    };
    match pooling {
        Pooling::Average => {
            for (ch, &g) in gu.iter().enumerate().take(c) {
                add_mean(gx, ch, g);
            }
        }
        Pooling::MeanStd => {
            for ch in 0..c {
                add_mean(gx, ch, gu[ch]);
                let p = &x[ch * hw..(ch + 1) * hw];
                let m = p.iter().sum::<f64>() / hw as f64;
                let sd = (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64).sqrt();
                if sd > 0.0 {
                    let k = gu[c + ch] / (hw as f64 * sd);
                    for (d, v) in gx[ch * hw..(ch + 1) * hw].iter_mut().zip(p) {
                        *d += k * (v - m);
                    }
                }
            }
        }
        Pooling::AvgMax => {
            for ch in 0..c {
                add_mean(gx, ch, gu[ch]);
                let p = &x[ch * hw..(ch + 1) * hw];
                let mut arg = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[arg] {
                        arg = i;
                    }
                }
                gx[ch * hw + arg] += gu[c + ch];
            }
        }
        Pooling::Pyramid(levels) => {
            let mut idx = 0;
            for &l in levels {
                for ch in 0..c {
                    for ci in 0..l {
                        let (r0, r1) = adaptive_bounds(ci, l, h);
                        for cj in 0..l {
                            let (c0, c1) = adaptive_bounds(cj, l, w);
                            let g = gu[idx] / ((r1 - r0) * (c1 - c0)) as f64;
                            idx += 1;
                            for r in r0..r1 {
                                for d in &mut gx[ch * hw + r * w + c0..ch * hw + r * w + c1] {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Saved per-sample values of a standard attention forward.
#[derive(Debug, Clone)]
pub struct StandardCache {
    caches: Vec<BodyCache>,
    /// Attention vectors, `[N, C]`.
    pub vectors: Tensor,
}

/// Standard (input-dependent) channel attention: pools each sample, runs the
/// body, rescales. Returns `(x', v)` with `v: [N, C]`.
pub fn attn_standard(kind: &AttentionKind, params: &AttentionParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (out, cache) = attn_standard_cached(kind, params, x)?;
    Ok((out, cache.vectors))
}

pub(crate) fn attn_standard_cached(
    kind: &AttentionKind,
    params: &AttentionParams,
    x: &Tensor,
) -> Result<(Tensor, StandardCache)> {
    let (n, c, h, w) = x.dims4("attention")?;
    let pooling = kind.pooling();
    let mut caches = Vec::with_capacity(n);
    let mut vdata = Vec::with_capacity(n * c);
    for s in 0..n {
        let u = pool_sample(pooling, x.sample(s), c, h, w);
        let (v, cache) = body_eval(params, c, &u)?;
        vdata.extend_from_slice(&v);
        caches.push(cache);
    }
    let vectors = Tensor::from_parts(vec![n, c], vdata);
    let out = ops::channel_mul_per_sample(x, &vectors)?;
    Ok((out, StandardCache { caches, vectors }))
}

/// Returns `(grad_input, grad_theta)` for [`attn_standard`].
pub(crate) fn attn_standard_backward(
    kind: &AttentionKind,
    params: &AttentionParams,
    x: &Tensor,
    cache: &StandardCache,
    grad_out: &Tensor,
) -> Result<(Tensor, AttentionParams)> {
    let (n, c, h, w) = x.dims4("attention_backward")?;
    let hw = h * w;
    let pooling = kind.pooling();
    let mut grads = params.zeros_like();
    let mut gx = ops::channel_mul_per_sample(grad_out, &cache.vectors)?.into_data();
    for s in 0..n {
        let xs = x.sample(s);
        let gs = grad_out.sample(s);
        let gv: Vec<f64> = (0..c)
            .map(|ch| {
                xs[ch * hw..(ch + 1) * hw]
                    .iter()
                    .zip(&gs[ch * hw..(ch + 1) * hw])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let gu = body_grad(params, &cache.caches[s], &gv, &mut grads);
        pool_sample_backward(pooling, xs, c, h, w, &gu, &mut gx[s * c * hw..(s + 1) * c * hw]);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), gx), grads))
}

/// `v = sigmoid(psi)`: the learnable vector alone, without an attention body.
pub fn no_body_vector(psi: &Tensor) -> Tensor {
    ops::sigmoid(psi)
}

/// Constant-input attention vector `sigmoid(F_theta(psi))`.
pub fn asr_body_vector(params: &AttentionParams, channels: usize, psi: &Tensor) -> Result<(Tensor, BodyCache)> {
    let (v, cache) = body_eval(params, channels, psi.data())?;
    Ok((Tensor::from_vec(v)?, cache))
}

/// Gradients `(grad_psi, grad_theta)` of the constant-input vector given `dL/dv`.
pub(crate) fn asr_body_backward(
    params: &AttentionParams,
    cache: &BodyCache,
    grad_v: &[f64],
) -> (Vec<f64>, AttentionParams) {
    let mut grads = params.zeros_like();
    let gpsi = body_grad(params, cache, grad_v, &mut grads);
    (gpsi, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PsiMode {
    /// Trained with the rest of the model, initialized to a constant.
    Learnable { init: f64 },
    /// Every element fixed to `value`; excluded from the optimizer.
    FrozenConstant { value: f64 },
    /// Sampled once from `N(0, std^2)`; excluded from the optimizer.
    FrozenGaussian { std: f64, seed: u64 },
}

impl Default for PsiMode {
    fn default() -> Self {
        PsiMode::Learnable { init: DEFAULT_PSI_INIT }
    }
}

impl PsiMode {
    pub fn is_learnable(&self) -> bool {
        matches!(self, PsiMode::Learnable { .. })
    }

    pub fn initial(&self, len: usize) -> Tensor {
        match *self {
            PsiMode::Learnable { init } => Tensor::full(&[len], init),
            PsiMode::FrozenConstant { value } => Tensor::full(&[len], value),
            PsiMode::FrozenGaussian { std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                Tensor::from_parts(vec![len], data)
            }
        }
    }
}

/// Whether a slot reads its input (standard) or a constant ψ (ASR / body-free).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SlotMode {
    Standard,
    Asr { psi: PsiMode },
    NoBody { psi: PsiMode },
}

/// One attention module attached to a model graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSlot {
    pub id: String,
    pub kind: AttentionKind,
    pub channels: usize,
    pub mode: SlotMode,
    pub position: PositionTag,
    pub delta_index: usize,
}

impl AttentionSlot {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Invariant(format!("slot {} has zero channels", self.id)));
        }
        match self.mode {
            SlotMode::NoBody { .. } => Ok(()),
            _ => self.kind.validate(self.channels),
        }
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self.mode, SlotMode::Standard)
    }

    pub fn psi_name(&self) -> String {
        format!("{}.psi", self.id)
    }

    pub fn psi_len(&self) -> usize {
        match self.mode {
            SlotMode::NoBody { .. } => self.channels,
            _ => self.kind.psi_len(self.channels),
        }
    }

    /// Parameter names of θ, in canonical order; empty for body-free slots.
    pub fn body_param_names(&self) -> Vec<String> {
        match self.mode {
            SlotMode::NoBody { .. } => Vec::new(),
            _ => self
                .kind
                .param_shapes(self.channels)
                .into_iter()
                .map(|(n, _)| format!("{}.{n}", self.id))
                .collect(),
        }
    }

    /// Every parameter this slot owns (θ and ψ).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.body_param_names();
        if self.is_constant() {
            names.push(self.psi_name());
        }
        names
    }

    /// Initializes θ and ψ into `params`.
    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        self.validate()?;
        if !matches!(self.mode, SlotMode::NoBody { .. }) {
            let theta = self.kind.init_params(self.channels, rng);
            for (name, t) in self.body_param_names().into_iter().zip(theta.tensors()) {
                params.insert(name, t.clone(), ParamKind::Trainable);
            }
        }
        if let SlotMode::Asr { psi } | SlotMode::NoBody { psi } = self.mode {
            let kind = if psi.is_learnable() { ParamKind::Trainable } else { ParamKind::Frozen };
            params.insert(self.psi_name(), psi.initial(self.psi_len()), kind);
        }
        Ok(())
    }

    pub fn body_params(&self, params: &ParamSet) -> Result<AttentionParams> {
        let tensors = self
            .body_param_names()
            .iter()
            .map(|n| params.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        AttentionParams::from_tensors(&self.kind, self.channels, tensors)
    }

    pub(crate) fn accumulate_body_grads(&self, params: &mut ParamSet, grads: &AttentionParams) -> Result<()> {
        for (name, g) in self.body_param_names().iter().zip(grads.tensors()) {
            params.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

/// The constant vector `v_{psi,theta}` of an ASR or body-free slot.
pub fn asr_vector(slot: &AttentionSlot, params: &ParamSet) -> Result<Tensor> {
    let psi = params.get(&slot.psi_name())?;
    match slot.mode {
        SlotMode::Asr { .. } => Ok(asr_body_vector(&slot.body_params(params)?, slot.channels, psi)?.0),
        SlotMode::NoBody { .. } => Ok(no_body_vector(psi)),
        SlotMode::Standard => Err(Error::State(format!(
            "slot {} is input-dependent and has no constant vector",
            slot.id
        ))),
    }
}

/// `x ⊙ v_{psi,theta}`.
pub fn asr_apply(slot: &AttentionSlot, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    ops::channel_mul(x, &asr_vector(slot, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn ie_zero_params_gives_half() {
        let p = AttentionParams::Affine { gamma: Tensor::zeros(&[4]), beta: Tensor::zeros(&[4]) };
        let v = body_forward(&p, 4, &Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn se_zero_output_layer_gives_half() {
        let mut r = rng();
        let kind = AttentionKind::Se { reduction: 2 };
        let AttentionParams::Mlp { w1, .. } = kind.init_params(8, &mut r) else { unreachable!() };
        let p = AttentionParams::Mlp { w1, w2: Tensor::zeros(&[8, 4]) };
        let u = Tensor::uniform(&[8], -3.0, 3.0, &mut r);
        assert!(body_forward(&p, 8, &u).unwrap().data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn se_matches_manual_composition() {
        let mut r = rng();
        let kind = AttentionKind::Se { reduction: 2 };
        let p = kind.init_params(8, &mut r);
        let AttentionParams::Mlp { w1, w2 } = &p else { unreachable!() };
        let u = Tensor::uniform(&[8], -1.0, 1.0, &mut r);
        let h = ops::relu(&ops::linear(&u.clone().reshape(vec![1, 8]).unwrap(), w1, None).unwrap());
        let want = ops::sigmoid(&ops::linear(&h, w2, None).unwrap());
        let got = body_forward(&p, 8, &u).unwrap();
        assert!(got.max_abs_diff(&want.reshape(vec![8]).unwrap()).unwrap() <= 1e-15);
    }

    #[test]
    fn eca_is_circular() {
        let p = AttentionParams::Conv1d { weight: Tensor::from_vec(vec![1.0, 0.0, 0.0]).unwrap() };
        // z_c = u_{c-1 mod C}
        let u = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let v = body_forward(&p, 4, &u).unwrap();
        let want: Vec<f64> = [3.0, 0.0, 1.0, 2.0].iter().map(|&t| sigmoid_scalar(t)).collect();
        assert_eq!(v.data(), want.as_slice());
    }

    #[test]
    fn standard_ie_on_constant_channels() {
        let x = Tensor::new(vec![1, 2, 2, 2], vec![0.3, 0.3, 0.3, 0.3, -1.2, -1.2, -1.2, -1.2]).unwrap();
        let kind = AttentionKind::Ie;
        let p = kind.init_params(2, &mut rng());
        let (_, v) = attn_standard(&kind, &p, &x).unwrap();
        assert_eq!(v.data(), &[sigmoid_scalar(0.3), sigmoid_scalar(-1.2)]);
    }

    #[test]
    fn standard_se_matches_gap_then_body() {
        let mut r = rng();
        let kind = AttentionKind::Se { reduction: 2 };
        let p = kind.init_params(4, &mut r);
        let x = Tensor::uniform(&[3, 4, 3, 3], -1.0, 1.0, &mut r);
        let (out, v) = attn_standard(&kind, &p, &x).unwrap();
        let u = ops::global_avg_pool(&x).unwrap();
        for s in 0..3 {
            let us = Tensor::from_vec(u.sample(s).to_vec()).unwrap();
            let vs = body_forward(&p, 4, &us).unwrap();
            assert!(vs.data().iter().zip(v.sample(s)).all(|(a, b)| (a - b).abs() <= 1e-15));
        }
        assert!(v.data().iter().all(|&t| t > 0.0 && t < 1.0));
        assert_eq!(out, ops::channel_mul_per_sample(&x, &v).unwrap());
    }

    #[test]
    fn srm_single_pixel_std_is_zero() {
        let kind = AttentionKind::Srm;
        let p = AttentionParams::Style { w_mean: Tensor::zeros(&[2]), w_std: Tensor::ones(&[2]) };
        let x = Tensor::new(vec![1, 2, 1, 1], vec![5.0, -3.0]).unwrap();
        let (_, v) = attn_standard(&kind, &p, &x).unwrap();
        assert_eq!(v.data(), &[0.5, 0.5]);
    }

    #[test]
    fn pyramid_pool_lengths() {
        let kind = AttentionKind::Spa { levels: vec![1, 2, 4], reduction: 2 };
        assert_eq!(kind.pooled_len(4), 4 * 21);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let u = pool_sample(kind.pooling(), &x, 1, 4, 4);
        assert_eq!(u.len(), 21);
        assert_eq!(u[0], 7.5);
        assert_eq!(&u[1..5], &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(&u[5..], x.as_slice());
    }

    #[test]
    fn kind_validation() {
        assert!(AttentionKind::Se { reduction: 3 }.validate(8).is_err());
        assert!(AttentionKind::Eca { kernel: 4 }.validate(8).is_err());
        assert!(AttentionKind::Eca { kernel: 5 }.validate(8).is_ok());
    }

    fn slot(kind: AttentionKind, psi: PsiMode) -> AttentionSlot {
        AttentionSlot {
            id: "s".into(),
            kind,
            channels: 4,
            mode: SlotMode::Asr { psi },
            position: PositionTag::AfterLastBn,
            delta_index: 0,
        }
    }

    #[test]
    fn frozen_constant_ie_vector() {
        let s = slot(AttentionKind::Ie, PsiMode::FrozenConstant { value: 0.1 });
        let mut params = ParamSet::new();
        s.init_params(&mut params, &mut rng()).unwrap();
        let v = asr_vector(&s, &params).unwrap();
        for &x in v.data() {
            assert!((x - 0.52498).abs() < 1e-5);
        }
        assert_eq!(params.entry("s.psi").unwrap().kind, ParamKind::Frozen);
    }

    #[test]
    fn no_body_limits() {
        assert!(no_body_vector(&Tensor::zeros(&[3])).data().iter().all(|&v| v == 0.5));
        assert!(no_body_vector(&Tensor::full(&[3], 20.0)).data().iter().all(|&v| v > 1.0 - 1e-8));
    }

    #[test]
    fn asr_vector_is_input_independent() {
        let s = slot(AttentionKind::Se { reduction: 2 }, PsiMode::default());
        let mut params = ParamSet::new();
        s.init_params(&mut params, &mut rng()).unwrap();
        let mut r = rng();
        let x1 = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r);
        let x2 = Tensor::uniform(&[2, 4, 3, 3], -5.0, 5.0, &mut r);
        let v = asr_vector(&s, &params).unwrap();
        assert_eq!(asr_apply(&s, &params, &x1).unwrap(), ops::channel_mul(&x1, &v).unwrap());
        assert_eq!(asr_apply(&s, &params, &x2).unwrap(), ops::channel_mul(&x2, &v).unwrap());
        assert_eq!(asr_vector(&s, &params).unwrap(), v);
    }
}
