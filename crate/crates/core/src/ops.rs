//! Forward numeric kernels and the matching backward rules.
//!
//! Every function here is a pure function of its arguments. Convolutions run
//! as im2col followed by a GEMM; the GEMM itself is `matrixmultiply::dgemm`.

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// `c = a·b + beta·c` for row/column-strided dense matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: the three asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `(batch, channels, spatial)` view for `[N, C]` and `[N, C, H, W]` tensors.
pub(crate) fn channel_layout(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dim(op, format!("expected [N,C] or [N,C,H,W], got {:?}", x.shape()))),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geometry(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Result<(usize, usize, ConvGeom)> {
    let (n, c, h, w) = x.dims4("conv2d")?;
    let (o, kc, kh, kw) = k.dims4("conv2d")?;
    if kc != c {
        return Err(Error::dim(
            "conv2d",
            format!("input channels (axis 1) {c} != kernel input channels (axis 1) {kc}"),
        ));
    }
    if spec.stride == 0 {
        return Err(Error::Invariant("convolution stride must be positive".into()));
    }
    let oh = spec.output_dim(h, kh)?;
    let ow = spec.output_dim(w, kw)?;
    Ok((n, o, ConvGeom { c, h, w, kh, kw, oh, ow, spec }))
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    let pad = g.spec.padding as isize;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.spec.stride + ki) as isize - pad;
                    let dst = &mut out[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.spec.stride + kj) as isize - pad;
                        *d = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.cols();
    let pad = g.spec.padding as isize;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.spec.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.spec.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N,C,H,W]` with `k: [O,C,Kh,Kw]` plus a per-output-channel bias.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (n, o, g) = conv_geometry(x, k, spec)?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::dim("conv2d", format!("bias shape {:?}, expected [{o}]", b.shape())));
        }
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut out = vec![0.0; n * o * ncols];
    let in_per = g.c * g.h * g.w;
    for s in 0..n {
        im2col(&x.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
        let dst = &mut out[s * o * ncols..(s + 1) * o * ncols];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        gemm(o, rows, ncols, k.data(), (rows, 1), &cols, (ncols, 1), 1.0, dst, (ncols, 1));
    }
    Ok(Tensor::from_parts(vec![n, o, g.oh, g.ow], out))
}

/// Gradients of a convolution given the upstream gradient of its output.
pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<Conv2dGrads> {
    let (n, o, g) = conv_geometry(x, k, spec)?;
    if grad_out.shape() != [n, o, g.oh, g.ow] {
        return Err(Error::dim("conv2d_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let in_per = g.c * g.h * g.w;
    let mut cols = vec![0.0; rows * ncols];
    let mut gcols = vec![0.0; rows * ncols];
    let mut gk = vec![0.0; o * rows];
    let mut gb = vec![0.0; o];
    let mut gx = if need_input { vec![0.0; n * in_per] } else { Vec::new() };
    for s in 0..n {
        let go = &grad_out.data()[s * o * ncols..(s + 1) * o * ncols];
        for (oc, chunk) in go.chunks(ncols).enumerate() {
            gb[oc] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[s * in_per..(s + 1) * in_per], &g, &mut cols);
        // gk[o, rows] += go[o, ncols] · cols^T
        gemm(o, ncols, rows, go, (ncols, 1), &cols, (1, ncols), 1.0, &mut gk, (rows, 1));
        if need_input {
            // gcols[rows, ncols] = k^T · go
            gemm(rows, o, ncols, k.data(), (1, rows), go, (ncols, 1), 0.0, &mut gcols, (ncols, 1));
            col2im_add(&gcols, &g, &mut gx[s * in_per..(s + 1) * in_per]);
        }
    }
    Ok(Conv2dGrads {
        input: need_input.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        kernel: Tensor::from_parts(k.shape().to_vec(), gk),
        bias: Tensor::from_parts(vec![o], gb),
    })
}

/// Mean over spatial positions: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let data = x.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::dim("global_avg_pool_backward", "input must be rank 4"));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::dim("global_avg_pool_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let mut gx = Vec::with_capacity(n * c * hw);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}

/// 2×2 average pooling with stride 2 (trailing odd rows/columns dropped).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    if h < 2 || w < 2 {
        return Err(Error::dim("avg_pool2", format!("spatial {h}x{w} smaller than the 2x2 window")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let a = plane[2 * i * w + 2 * j] + plane[2 * i * w + 2 * j + 1];
                let b = plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1];
                out.push(0.25 * (a + b));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool2_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::dim("avg_pool2_backward", "input must be rank 4"));
    };
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::dim("avg_pool2_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let mut gx = vec![0.0; n * c * h * w];
    for (p, gplane) in grad_out.data().chunks(oh * ow).enumerate() {
        let plane = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * gplane[i * ow + j];
                plane[2 * i * w + 2 * j] += g;
                plane[2 * i * w + 2 * j + 1] += g;
                plane[(2 * i + 1) * w + 2 * j] += g;
                plane[(2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}

/// Per-channel affine scale/shift parameters of a normalization layer.
pub struct BatchNormParams<'a> {
    pub mean: &'a Tensor,
    pub var: &'a Tensor,
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub eps: f64,
}

/// Additive/multiplicative perturbation of the normalized activation:
/// `[(x-mu)/sigma * scale + shift] * gamma + beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnPerturbation {
    pub scale: f64,
    pub shift: f64,
}

fn check_bn_params(c: usize, p: &BatchNormParams<'_>, op: &str) -> Result<()> {
    for (name, t) in [("mean", p.mean), ("var", p.var), ("gamma", p.gamma), ("beta", p.beta)] {
        if t.shape() != [c] {
            return Err(Error::dim(op, format!("{name} shape {:?}, expected [{c}]", t.shape())));
        }
    }
    if let Some(i) = p.var.data().iter().position(|&v| v < 0.0) {
        return Err(Error::Invariant(format!("negative running variance at channel {i}")));
    }
    if p.eps < 0.0 {
        return Err(Error::Invariant("batch-norm eps must be non-negative".into()));
    }
    Ok(())
}

/// Inference-mode batch normalization with running statistics; the variance
/// is stored, sigma is its square root.
pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams<'_>) -> Result<Tensor> {
    batchnorm_infer_perturbed(x, p, None)
}

pub fn batchnorm_infer_perturbed(
    x: &Tensor,
    p: &BatchNormParams<'_>,
    noise: Option<BnPerturbation>,
) -> Result<Tensor> {
    let (_, c, spatial) = channel_layout(x, "batchnorm")?;
    check_bn_params(c, p, "batchnorm")?;
    let noise = noise.unwrap_or(BnPerturbation { scale: 1.0, shift: 0.0 });
    let mut out = x.data().to_vec();
    for (idx, chunk) in out.chunks_mut(spatial).enumerate() {
        let ch = idx % c;
        let mu = p.mean.data()[ch];
        let sd = (p.var.data()[ch] + p.eps).sqrt();
        let (g, b) = (p.gamma.data()[ch], p.beta.data()[ch]);
        for v in chunk.iter_mut() {
            let norm = (*v - mu) / sd;
            *v = (norm * noise.scale + noise.shift) * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Saved values of a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnTrainCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Training-mode batch normalization using batch statistics over `(N, H, W)`.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnTrainCache)> {
    let (n, c, spatial) = channel_layout(x, "batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("batchnorm", format!("affine params must have shape [{c}]")));
    }
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (idx, chunk) in x.data().chunks(spatial).enumerate() {
        mean[idx % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for (idx, chunk) in x.data().chunks(spatial).enumerate() {
        let mu = mean[idx % c];
        var[idx % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.data().to_vec();
    let mut y = vec![0.0; xhat.len()];
    for (idx, (xc, yc)) in xhat.chunks_mut(spatial).zip(y.chunks_mut(spatial)).enumerate() {
        let ch = idx % c;
        for (xv, yv) in xc.iter_mut().zip(yc.iter_mut()) {
            *xv = (*xv - mean[ch]) * inv_std[ch];
            *yv = *xv * gamma.data()[ch] + beta.data()[ch];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        BnTrainCache {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`; differentiates through the batch statistics.
pub fn batchnorm_train_backward(
    cache: &BnTrainCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    cache.xhat.expect_same_shape(grad_out, "batchnorm_backward")?;
    let (n, c, spatial) = channel_layout(grad_out, "batchnorm_backward")?;
    let m = (n * spatial) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (idx, (gc, xc)) in grad_out
        .data()
        .chunks(spatial)
        .zip(cache.xhat.data().chunks(spatial))
        .enumerate()
    {
        let ch = idx % c;
        for (g, xh) in gc.iter().zip(xc) {
            sum_g[ch] += g;
            sum_gx[ch] += g * xh;
        }
    }
    let mut gx = vec![0.0; grad_out.len()];
    for (idx, ((dst, gc), xc)) in gx
        .chunks_mut(spatial)
        .zip(grad_out.data().chunks(spatial))
        .zip(cache.xhat.data().chunks(spatial))
        .enumerate()
    {
        let ch = idx % c;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        for ((d, g), xh) in dst.iter_mut().zip(gc).zip(xc) {
            *d = k * (m * g - sum_g[ch] - xh * sum_gx[ch]);
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], sum_gx),
        Tensor::from_parts(vec![c], sum_g),
    ))
}

/// Scales channel `c` of `x` (`[N,C]` or `[N,C,H,W]`) by `v[c]`.
pub fn channel_mul(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, c, spatial) = channel_layout(x, "channel_mul")?;
    if v.len() != c {
        return Err(Error::dim("channel_mul", format!("vector length {} != channels {c}", v.len())));
    }
    let mut out = x.data().to_vec();
    for (idx, chunk) in out.chunks_mut(spatial).enumerate() {
        let s = v.data()[idx % c];
        chunk.iter_mut().for_each(|e| *e *= s);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-sample channel scaling: `v` is `[N, C]`.
pub fn channel_mul_per_sample(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, c, spatial) = channel_layout(x, "channel_mul")?;
    if v.shape() != [n, c] {
        return Err(Error::dim("channel_mul", format!("vector shape {:?}, expected [{n},{c}]", v.shape())));
    }
    let mut out = x.data().to_vec();
    for (idx, chunk) in out.chunks_mut(spatial).enumerate() {
        let s = v.data()[idx];
        chunk.iter_mut().for_each(|e| *e *= s);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `sum over (n, spatial) of grad * x` per channel: the gradient of
/// `channel_mul(x, v)` with respect to a shared `v`.
pub fn channel_mul_vector_grad(x: &Tensor, grad_out: &Tensor) -> Result<Vec<f64>> {
    x.expect_same_shape(grad_out, "channel_mul_backward")?;
    let (_, c, spatial) = channel_layout(x, "channel_mul_backward")?;
    let mut gv = vec![0.0; c];
    for (idx, (xc, gc)) in x.data().chunks(spatial).zip(grad_out.data().chunks(spatial)).enumerate() {
        gv[idx % c] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(gv)
}

pub fn sigmoid_scalar(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn relu_scalar(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        0.0
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(relu_scalar)
}

/// ReLU backward with subgradient 0 at exactly 0; takes the forward input.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Affine map `x·Wᵀ + b` for `x: [N,D]`, `W: [M,D]`, `b: [M]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = x.dims2("linear")?;
    let (m, wd) = w.dims2("linear")?;
    if wd != d {
        return Err(Error::dim("linear", format!("input features (axis 1) {d} != weight features (axis 1) {wd}")));
    }
    let mut out = vec![0.0; n * m];
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::dim("linear", format!("bias shape {:?}, expected [{m}]", b.shape())));
        }
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, d, m, x.data(), (d, 1), w.data(), (1, d), 1.0, &mut out, (m, 1));
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Returns `(grad_input, grad_weight, grad_bias)` for [`linear`].
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = x.dims2("linear_backward")?;
    let (m, _) = w.dims2("linear_backward")?;
    if grad_out.shape() != [n, m] {
        return Err(Error::dim("linear_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let mut gx = vec![0.0; n * d];
    gemm(n, m, d, grad_out.data(), (m, 1), w.data(), (d, 1), 0.0, &mut gx, (d, 1));
    let mut gw = vec![0.0; m * d];
    gemm(m, n, d, grad_out.data(), (1, m), x.data(), (d, 1), 0.0, &mut gw, (d, 1));
    let mut gb = vec![0.0; m];
    for row in grad_out.data().chunks(m) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::from_parts(vec![n, d], gx),
        Tensor::from_parts(vec![m, d], gw),
        Tensor::from_parts(vec![m], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = x.dims4("t").unwrap();
        let (o, _, kh, kw) = k.dims4("t").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for s in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[oc];
                        for ci in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let ii = (i * stride + a) as isize - pad as isize;
                                    let jj = (j * stride + bb) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        acc += x.data()[((s * c + ci) * h + ii as usize) * w + jj as usize]
                                            * k.data()[((oc * c + ci) * kh + a) * kw + bb];
                                    }
                                }
                            }
                        }
                        out[((s * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_identity_and_zero_kernel() {
        let mut r = rng();
        let x = Tensor::uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut r);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[1])), ConvSpec::default()).unwrap();
        assert_eq!(y, x);
        let k0 = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k0, Some(&Tensor::full(&[1], 3.0)), ConvSpec::new(1, 1).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut r = rng();
        for &(stride, pad) in &[(1, 1), (1, 0), (2, 1), (2, 0)] {
            let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
            let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
            let spec = ConvSpec::new(stride, pad).unwrap();
            let fast = conv2d(&x, &k, Some(&b), spec).unwrap();
            let slow = naive_conv(&x, &k, &b, stride, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn conv_reports_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, None, ConvSpec::default()).unwrap_err();
        assert!(err.to_string().contains("axis 1"));
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[2, 3, 4, 4], 1.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.75));
        let one = Tensor::new(vec![1, 2, 1, 1], vec![-0.3, 0.9]).unwrap();
        assert_eq!(global_avg_pool(&one).unwrap().data(), one.data());
    }

    #[test]
    fn batchnorm_examples() {
        let mut r = rng();
        let x = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
        let (z, o) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
        let p = BatchNormParams { mean: &z, var: &o, gamma: &o, beta: &z, eps: 0.0 };
        assert_eq!(batchnorm_infer(&x, &p).unwrap(), x);

        let beta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let p = BatchNormParams { mean: &o, var: &o, gamma: &z, beta: &beta, eps: 1e-5 };
        let y = batchnorm_infer(&x, &p).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 4) % 3]);
        }

        let mean = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let var = Tensor::uniform(&[3], 0.1, 2.0, &mut r);
        let gamma = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let beta = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let p = BatchNormParams { mean: &mean, var: &var, gamma: &gamma, beta: &beta, eps: 1e-5 };
        let y = batchnorm_infer(&x, &p).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let c = (i / 4) % 3;
            let want = (x.data()[i] - mean.data()[c]) / (var.data()[c] + 1e-5).sqrt() * gamma.data()[c]
                + beta.data()[c];
            assert!((v - want).abs() <= 1e-12);
        }

        let neg = Tensor::new(vec![3], vec![1.0, -0.1, 1.0]).unwrap();
        let p = BatchNormParams { mean: &z, var: &neg, gamma: &o, beta: &z, eps: 1e-5 };
        assert!(matches!(batchnorm_infer(&x, &p), Err(Error::Invariant(_))));
    }

    #[test]
    fn channel_mul_examples() {
        let mut r = rng();
        let x = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
        assert_eq!(channel_mul(&x, &Tensor::ones(&[3])).unwrap(), x);
        assert!(channel_mul(&x, &Tensor::zeros(&[3])).unwrap().data().iter().all(|&v| v == 0.0));
        let v = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let y = channel_mul(&x, &v).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for s in 0..4 {
                    let i = (n * 3 + c) * 4 + s;
                    assert_eq!(y.data()[i], x.data()[i] * v.data()[c]);
                }
            }
        }
        assert!(channel_mul(&x, &Tensor::ones(&[2])).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(relu_scalar(-2.0), 0.0);
        assert_eq!(relu_scalar(2.0), 2.0);
        for t in [-800.0, -30.0, -1.0, 3.0, 30.0] {
            let s = sigmoid_scalar(t);
            assert!((0.0..=1.0).contains(&s));
        }
        for t in [-30.0, -1.0, 3.0, 30.0] {
            let s = sigmoid_scalar(t);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for n in 0..4 {
            for m in 0..3 {
                let mut acc = b.data()[m];
                for d in 0..5 {
                    acc += w.data()[m * 5 + d] * x.data()[n * 5 + d];
                }
                assert!((y.data()[n * 3 + m] - acc).abs() <= 1e-12);
            }
        }
        assert!(linear(&x, &Tensor::zeros(&[3, 4]), None).is_err());
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
    }
}
