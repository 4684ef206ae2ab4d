//! Convolution, tdBN, pooling and resampling kernels, the LCB composite,
//! and tdBN-into-convolution folding.
//!
//! Kernels operate on whole `(T, N, C, H, W)` tensors; convolution and
//! pooling act on each `(t, n)` frame independently. Frame results are
//! computed in parallel and reduced in frame order, so outputs do not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{run_layer, ILIFParams, Neuron, SpikeMode};
use crate::tensor::{RealTensor, Shape, SpikeTensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// `k x k` convolution with "same" padding (`k / 2`).
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: ch,
            ..Self::same(ch, ch, kernel, stride)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::Config(format!("conv geometry has a zero field: {self:?}")));
        }
        if !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_per_group() * self.kernel * self.kernel
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::dim(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    pub fn out_shape(&self, x: Shape) -> Result<Shape> {
        if x.c != self.in_ch {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, x.c
            )));
        }
        let (ho, wo) = self.out_hw(x.h, x.w)?;
        Ok(Shape { c: self.out_ch, h: ho, w: wo, ..x })
    }
}

/// Convolution with explicit weights `[out, in/groups, k, k]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub geom: ConvGeom,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn new(geom: ConvGeom, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let spec = Self { geom, weight, bias };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zeros(geom: ConvGeom) -> Self {
        Self {
            geom,
            weight: vec![0.0; geom.weight_len()],
            bias: vec![0.0; geom.out_ch],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if self.weight.len() != self.geom.weight_len() {
            return Err(Error::dim(format!(
                "weight length {} != {}",
                self.weight.len(),
                self.geom.weight_len()
            )));
        }
        if self.bias.len() != self.geom.out_ch {
            return Err(Error::dim(format!(
                "bias length {} != {}",
                self.bias.len(),
                self.geom.out_ch
            )));
        }
        if !self.weight.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                layer: "conv".into(),
                msg: "non-finite weight or bias".into(),
            });
        }
        Ok(())
    }

    /// Identity `1 x 1` convolution.
    pub fn identity(ch: usize) -> Self {
        let mut s = Self::zeros(ConvGeom::same(ch, ch, 1, 1));
        for c in 0..ch {
            s.weight[c * ch + c] = 1.0;
        }
        s
    }
}

// ---------------------------------------------------------------------------
// GEMM and im2col helpers

/// `C = A * B + beta * C` for row-major operands given by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover the strided extents implied by (m, k, n) and the
    // strides; callers pass contiguous row-major buffers of matching size.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers the receptive fields of group `g` of one frame into a
/// `[cin_g * k * k, ho * wo]` matrix.
fn im2col(frame: &[f64], s: Shape, geom: &ConvGeom, g: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = geom.kernel;
    let cin_g = geom.in_per_group();
    let p = ho * wo;
    let pad = geom.padding as isize;
    for ci in 0..cin_g {
        let c = g * cin_g + ci;
        let plane = &frame[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * geom.stride) as isize + ky as isize - pad;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= s.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * geom.stride) as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= s.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], s: Shape, geom: &ConvGeom, g: usize, ho: usize, wo: usize, frame: &mut [f64]) {
    let k = geom.kernel;
    let cin_g = geom.in_per_group();
    let p = ho * wo;
    let pad = geom.padding as isize;
    for ci in 0..cin_g {
        let c = g * cin_g + ci;
        let plane = &mut frame[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * geom.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geom.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < s.w as isize {
                            plane[iy as usize * s.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Raw convolution kernel. `weight` is `[out, in/groups, k, k]`.
pub fn conv_forward_raw(x: &RealTensor, geom: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> Result<RealTensor> {
    geom.validate()?;
    let s = x.shape();
    let out_shape = geom.out_shape(s)?;
    let (ho, wo) = (out_shape.h, out_shape.w);
    let p = ho * wo;
    let kk = geom.fan_in();
    let cout_g = geom.out_per_group();
    let in_frame = s.frame_len();
    let out_frame = out_shape.frame_len();

    let frames: Vec<Vec<f64>> = (0..s.frames())
        .into_par_iter()
        .map(|f| {
            let src = &x.data()[f * in_frame..(f + 1) * in_frame];
            let mut out = vec![0.0; out_frame];
            let mut cols = vec![0.0; kk * p];
            for g in 0..geom.groups {
                im2col(src, s, geom, g, ho, wo, &mut cols);
                let w = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
                let dst = &mut out[g * cout_g * p..(g + 1) * cout_g * p];
                gemm(cout_g, kk, p, w, (kk as isize, 1), &cols, (p as isize, 1), 0.0, dst);
            }
            if let Some(b) = bias {
                for (o, &bv) in b.iter().enumerate() {
                    out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
            out
        })
        .collect();
    Ok(RealTensor::from_raw(out_shape, frames.concat()))
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub fn conv_backward_raw(
    x: &RealTensor,
    geom: &ConvGeom,
    weight: &[f64],
    grad_out: &RealTensor,
) -> (RealTensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let os = grad_out.shape();
    let (ho, wo) = (os.h, os.w);
    let p = ho * wo;
    let kk = geom.fan_in();
    let cout_g = geom.out_per_group();
    let in_frame = s.frame_len();
    let out_frame = os.frame_len();

    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..s.frames())
        .into_par_iter()
        .map(|f| {
            let src = &x.data()[f * in_frame..(f + 1) * in_frame];
            let go = &grad_out.data()[f * out_frame..(f + 1) * out_frame];
            let mut gx = vec![0.0; in_frame];
            let mut gw = vec![0.0; weight.len()];
            let mut gb = vec![0.0; geom.out_ch];
            let mut cols = vec![0.0; kk * p];
            let mut gcols = vec![0.0; kk * p];
            for g in 0..geom.groups {
                im2col(src, s, geom, g, ho, wo, &mut cols);
                let gout = &go[g * cout_g * p..(g + 1) * cout_g * p];
                // dW_g = G * cols^T
                gemm(
                    cout_g,
                    p,
                    kk,
                    gout,
                    (p as isize, 1),
                    &cols,
                    (1, p as isize),
                    0.0,
                    &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk],
                );
                // dcols = W_g^T * G
                let w = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
                gemm(kk, cout_g, p, w, (1, kk as isize), gout, (p as isize, 1), 0.0, &mut gcols);
                col2im(&gcols, s, geom, g, ho, wo, &mut gx);
            }
            for (o, b) in gb.iter_mut().enumerate() {
                *b = go[o * p..(o + 1) * p].iter().sum();
            }
            (gx, gw, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(s.numel());
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; geom.out_ch];
    for (px, pw, pb) in parts {
        gx.extend_from_slice(&px);
        gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (RealTensor::from_raw(s, gx), gw, gb)
}

/// Cross-correlation with zero padding, applied to each time step.
pub fn conv2d(x: &RealTensor, spec: &ConvSpec) -> Result<RealTensor> {
    spec.validate()?;
    conv_forward_raw(x, &spec.geom, &spec.weight, Some(&spec.bias))
}

/// Integer spikes are promoted to reals before convolving.
pub fn conv2d_spikes(x: &SpikeTensor, spec: &ConvSpec) -> Result<RealTensor> {
    conv2d(&x.to_real(), spec)
}

// ---------------------------------------------------------------------------
// tdBN

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    #[default]
    Train,
    /// Running statistics.
    Eval,
}

/// Threshold-dependent batch normalization parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdBNParams {
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub v_th: f64,
    pub mu_inf: Vec<f64>,
    pub var_inf: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

impl TdBNParams {
    /// `lambda = 1`, `beta = 0`, `mu = 0`, `var = 1`, `alpha = 1`.
    pub fn new(ch: usize, v_th: f64) -> Self {
        Self {
            lambda: vec![1.0; ch],
            beta: vec![0.0; ch],
            alpha: DEFAULT_BN_ALPHA,
            v_th,
            mu_inf: vec![0.0; ch],
            var_inf: vec![1.0; ch],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.lambda.len();
        if self.beta.len() != c || self.mu_inf.len() != c || self.var_inf.len() != c {
            return Err(Error::dim("tdBN parameter vectors differ in length"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("tdBN eps must be > 0, got {}", self.eps)));
        }
        if self.var_inf.iter().any(|&v| v < 0.0) {
            return Err(Error::Invariant("tdBN running variance is negative".into()));
        }
        Ok(())
    }

    /// Per-channel multiplier `lambda * alpha * v_th`.
    pub fn gain(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l * self.alpha * self.v_th).collect()
    }
}

/// Per-channel population mean and variance over `(T, N, H, W)`.
pub fn channel_stats(x: &RealTensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    let count = s.frames() * s.plane();
    if count == 0 {
        return Err(Error::Statistics("tdBN needs at least one element per channel".into()));
    }
    let plane = s.plane();
    let mut mean = vec![0.0; s.c];
    for f in 0..s.frames() {
        for c in 0..s.c {
            let base = (f * s.c + c) * plane;
            mean[c] += x.data()[base..base + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; s.c];
    for f in 0..s.frames() {
        for c in 0..s.c {
            let base = (f * s.c + c) * plane;
            let m = mean[c];
            var[c] += x.data()[base..base + plane]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok((mean, var))
}

/// Applies `y = gain_c * (x - mean_c) * inv_std_c + beta_c`, returning `y`
/// and the normalized input.
pub(crate) fn bn_apply(x: &RealTensor, mean: &[f64], inv_std: &[f64], gain: &[f64], beta: &[f64]) -> (RealTensor, Vec<f64>) {
    let s = x.shape();
    let plane = s.plane();
    let mut y = vec![0.0; s.numel()];
    let mut xhat = vec![0.0; s.numel()];
    for f in 0..s.frames() {
        for c in 0..s.c {
            let base = (f * s.c + c) * plane;
            for i in base..base + plane {
                let nh = (x.data()[i] - mean[c]) * inv_std[c];
                xhat[i] = nh;
                y[i] = gain[c] * nh + beta[c];
            }
        }
    }
    (RealTensor::from_raw(s, y), xhat)
}

/// tdBN forward. In train mode normalizes with batch statistics over
/// `(T, N, H, W)` and updates the running statistics with momentum
/// (unbiased variance); in eval mode uses the running statistics.
pub fn tdbn_forward(x: &RealTensor, p: &mut TdBNParams) -> Result<RealTensor> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::dim(format!(
            "tdBN has {} channels, input has {}",
            p.channels(),
            s.c
        )));
    }
    let gain = p.gain();
    match p.mode {
        BnMode::Train => {
            let (mean, var) = channel_stats(x)?;
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            let (y, _) = bn_apply(x, &mean, &inv, &gain, &p.beta);
            update_running(p, &mean, &var, s.frames() * s.plane());
            Ok(y)
        }
        BnMode::Eval => {
            let inv: Vec<f64> = p.var_inf.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            Ok(bn_apply(x, &p.mu_inf, &inv, &gain, &p.beta).0)
        }
    }
}

pub(crate) fn update_running(p: &mut TdBNParams, mean: &[f64], var: &[f64], count: usize) {
    let m = p.momentum;
    update_running_stats(&mut p.mu_inf, &mut p.var_inf, m, mean, var, count);
}

/// Momentum update of running statistics with the unbiased batch variance.
pub(crate) fn update_running_stats(mu: &mut [f64], var_inf: &mut [f64], momentum: f64, mean: &[f64], var: &[f64], count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for c in 0..mean.len() {
        mu[c] = (1.0 - momentum) * mu[c] + momentum * mean[c];
        var_inf[c] = (1.0 - momentum) * var_inf[c] + momentum * var[c] * unbias;
    }
}

/// Folds an eval-mode tdBN into the preceding convolution:
///
/// ```text
/// W' = lambda * alpha * v_th * W / sqrt(var + eps)
/// B' = lambda * alpha * v_th * (B - mu) / sqrt(var + eps) + beta
/// ```
pub fn fold_tdbn_into_conv(c: &ConvSpec, p: &TdBNParams) -> Result<ConvSpec> {
    c.validate()?;
    p.validate()?;
    if p.mode != BnMode::Eval {
        return Err(Error::Mode("tdBN folding requires eval-mode statistics".into()));
    }
    if p.channels() != c.geom.out_ch {
        return Err(Error::dim(format!(
            "tdBN has {} channels, conv produces {}",
            p.channels(),
            c.geom.out_ch
        )));
    }
    let per_out = c.geom.fan_in();
    let mut weight = c.weight.clone();
    let mut bias = c.bias.clone();
    for o in 0..c.geom.out_ch {
        let k = p.lambda[o] * p.alpha * p.v_th / (p.var_inf[o] + p.eps).sqrt();
        weight[o * per_out..(o + 1) * per_out]
            .iter_mut()
            .for_each(|w| *w *= k);
        bias[o] = k * (c.bias[o] - p.mu_inf[o]) + p.beta[o];
    }
    Ok(ConvSpec {
        geom: c.geom,
        weight,
        bias,
    })
}

// ---------------------------------------------------------------------------
// Pooling and resampling

/// 2x2 stride-2 max pooling. Returns the output and, for each output
/// element, the flat input index that won (first maximum on ties).
pub fn maxpool2_with_indices(x: &RealTensor) -> Result<(RealTensor, Vec<usize>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::dim(format!("maxpool2 needs even spatial dims, got {}x{}", s.h, s.w)));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let os = s.with_hw(ho, wo);
    let mut out = Vec::with_capacity(os.numel());
    let mut idx = Vec::with_capacity(os.numel());
    for f in 0..s.frames() {
        for c in 0..s.c {
            let base = (f * s.c + c) * s.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    out.push(x.data()[best]);
                    idx.push(best);
                }
            }
        }
    }
    Ok((RealTensor::from_raw(os, out), idx))
}

pub fn maxpool2(x: &RealTensor) -> Result<RealTensor> {
    Ok(maxpool2_with_indices(x)?.0)
}

/// Keeps every `s`-th row and column.
pub fn stride_downsample(x: &RealTensor, stride: usize) -> Result<RealTensor> {
    let s = x.shape();
    if stride == 0 || !s.h.is_multiple_of(stride) || !s.w.is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "spatial dims {}x{} not divisible by stride {stride}",
            s.h, s.w
        )));
    }
    let (ho, wo) = (s.h / stride, s.w / stride);
    let os = s.with_hw(ho, wo);
    let mut out = Vec::with_capacity(os.numel());
    for f in 0..s.frames() {
        for c in 0..s.c {
            let base = (f * s.c + c) * s.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(x.data()[base + oy * stride * s.w + ox * stride]);
                }
            }
        }
    }
    Ok(RealTensor::from_raw(os, out))
}

pub(crate) fn stride_downsample_backward(g: &RealTensor, input: Shape, stride: usize) -> RealTensor {
    let os = g.shape();
    let mut gx = vec![0.0; input.numel()];
    for f in 0..input.frames() {
        for c in 0..input.c {
            let ib = (f * input.c + c) * input.plane();
            let ob = (f * os.c + c) * os.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    gx[ib + oy * stride * input.w + ox * stride] = g.data()[ob + oy * os.w + ox];
                }
            }
        }
    }
    RealTensor::from_raw(input, gx)
}

/// Nearest-neighbor upsampling: each pixel becomes an `f x f` block.
pub fn nni_upsample(x: &RealTensor, factor: usize) -> Result<RealTensor> {
    if factor == 0 {
        return Err(Error::dim("upsampling factor must be >= 1"));
    }
    let s = x.shape();
    let os = s.with_hw(s.h * factor, s.w * factor);
    let mut out = Vec::with_capacity(os.numel());
    for f in 0..s.frames() {
        for c in 0..s.c {
            let base = (f * s.c + c) * s.plane();
            for oy in 0..os.h {
                let row = base + (oy / factor) * s.w;
                for ox in 0..os.w {
                    out.push(x.data()[row + ox / factor]);
                }
            }
        }
    }
    Ok(RealTensor::from_raw(os, out))
}

pub(crate) fn nni_upsample_backward(g: &RealTensor, input: Shape, factor: usize) -> RealTensor {
    let os = g.shape();
    let mut gx = vec![0.0; input.numel()];
    for f in 0..input.frames() {
        for c in 0..input.c {
            let ib = (f * input.c + c) * input.plane();
            let ob = (f * os.c + c) * os.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    gx[ib + (oy / factor) * input.w + ox / factor] += g.data()[ob + oy * os.w + ox];
                }
            }
        }
    }
    RealTensor::from_raw(input, gx)
}

// ---------------------------------------------------------------------------
// LCB

/// `tdBN(Conv(SN(x)))`: an I-LIF layer run over all time steps with
/// persistent membrane, then convolution, then tdBN. With `depthwise` the
/// convolution must have `groups == channels`.
pub fn lcb_forward(
    x: &RealTensor,
    neuron: &ILIFParams,
    conv: &ConvSpec,
    bn: &mut TdBNParams,
    depthwise: bool,
) -> Result<RealTensor> {
    neuron.validate()?;
    if !x.is_finite() {
        return Err(Error::Numeric {
            layer: "lcb".into(),
            msg: "non-finite input".into(),
        });
    }
    if depthwise && (conv.geom.groups != conv.geom.in_ch || conv.geom.in_ch != conv.geom.out_ch) {
        return Err(Error::Config(format!(
            "depthwise LCB needs groups == channels, got {:?}",
            conv.geom
        )));
    }
    let (spikes, _) = run_layer(x, &Neuron::Ilif(*neuron), SpikeMode::Integer);
    let z = conv2d(&spikes, conv)?;
    tdbn_forward(&z, bn)
}
