//! Integer LIF and binary LIF neuron dynamics, their surrogate gradients,
//! and conversion between integer spike counts and binary spike trains.
//!
//! ```text
//! u  = tau * h + x
//! o  = clip(round(u), 0, D)        (I-LIF)     o = [u >= v_th]   (LIF)
//! h' = u - v_th * o
//! ```
//!
//! `round` is half-away-from-zero. `v_th` only enters through the soft reset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RealTensor, Shape, SpikeTensor};

pub const DEFAULT_TAU: f64 = 0.25;
pub const DEFAULT_V_TH: f64 = 1.0;
pub const DEFAULT_D_MAX: i32 = 4;
pub const DEFAULT_LIF_A: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ILIFParams {
    pub tau: f64,
    pub v_th: f64,
    pub d_max: i32,
}

impl Default for ILIFParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            v_th: DEFAULT_V_TH,
            d_max: DEFAULT_D_MAX,
        }
    }
}

impl ILIFParams {
    pub fn new(tau: f64, v_th: f64, d_max: i32) -> Result<Self> {
        let p = Self { tau, v_th, d_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            return Err(Error::Config(format!("v_th must be > 0, got {}", self.v_th)));
        }
        if self.d_max < 1 {
            return Err(Error::Config(format!("d_max must be >= 1, got {}", self.d_max)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LIFParams {
    pub tau: f64,
    pub v_th: f64,
    /// Width of the rectangular surrogate window.
    pub a: f64,
}

impl Default for LIFParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            v_th: DEFAULT_V_TH,
            a: DEFAULT_LIF_A,
        }
    }
}

impl LIFParams {
    pub fn new(tau: f64, v_th: f64, a: f64) -> Result<Self> {
        let p = Self { tau, v_th, a };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::Config(format!("surrogate width a must be > 0, got {}", self.a)));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be > 0, got {}", self.v_th)));
        }
        Ok(())
    }
}

/// Retained membrane potential `h` for one time slice.
#[derive(Clone, Debug, PartialEq)]
pub struct MembraneState {
    pub h: RealTensor,
}

impl MembraneState {
    /// Resting state (all zeros) for a time slice of the given shape.
    pub fn resting(slice: Shape) -> Self {
        Self {
            h: RealTensor::zeros(slice.with_t(1)),
        }
    }
}

/// Round half away from zero, then clip to `[0, d_max]`.
#[inline]
pub fn quantize(u: f64, d_max: i32) -> i32 {
    u.round().clamp(0.0, d_max as f64) as i32
}

/// Scalar I-LIF update: returns `(u, spike, h')`.
#[inline]
pub fn ilif_scalar(h: f64, x: f64, p: &ILIFParams) -> (f64, i32, f64) {
    let u = p.tau * h + x;
    let o = quantize(u, p.d_max);
    (u, o, u - p.v_th * o as f64)
}

/// Scalar LIF update: returns `(u, spike, h')`. Threshold equality fires.
#[inline]
pub fn lif_scalar(h: f64, x: f64, p: &LIFParams) -> (f64, i32, f64) {
    let u = p.tau * h + x;
    let o = i32::from(u >= p.v_th);
    (u, o, u - p.v_th * o as f64)
}

fn check_step(state: &MembraneState, x: &RealTensor) -> Result<()> {
    if x.shape().t != 1 {
        return Err(Error::dim(format!(
            "step input must be a single time slice, got {}",
            x.shape()
        )));
    }
    if state.h.shape() != x.shape() {
        return Err(Error::dim(format!(
            "membrane state {} does not match input {}",
            state.h.shape(),
            x.shape()
        )));
    }
    if !x.is_finite() || !state.h.is_finite() {
        return Err(Error::Numeric {
            layer: "neuron".into(),
            msg: "non-finite membrane or input".into(),
        });
    }
    Ok(())
}

pub fn ilif_step(
    state: &MembraneState,
    x: &RealTensor,
    p: &ILIFParams,
) -> Result<(SpikeTensor, MembraneState)> {
    check_step(state, x)?;
    let mut spikes = Vec::with_capacity(x.len());
    let mut h = Vec::with_capacity(x.len());
    for (&hv, &xv) in state.h.data().iter().zip(x.data()) {
        let (_, o, h2) = ilif_scalar(hv, xv, p);
        spikes.push(o);
        h.push(h2);
    }
    Ok((
        SpikeTensor::from_raw(x.shape(), spikes, p.d_max),
        MembraneState {
            h: RealTensor::from_raw(x.shape(), h),
        },
    ))
}

pub fn lif_step(
    state: &MembraneState,
    x: &RealTensor,
    p: &LIFParams,
) -> Result<(SpikeTensor, MembraneState)> {
    check_step(state, x)?;
    let mut spikes = Vec::with_capacity(x.len());
    let mut h = Vec::with_capacity(x.len());
    for (&hv, &xv) in state.h.data().iter().zip(x.data()) {
        let (_, o, h2) = lif_scalar(hv, xv, p);
        spikes.push(o);
        h.push(h2);
    }
    Ok((
        SpikeTensor::from_raw(x.shape(), spikes, 1),
        MembraneState {
            h: RealTensor::from_raw(x.shape(), h),
        },
    ))
}

/// Straight-through gradient of the I-LIF quantizer: 1 on the closed
/// interval `[0, d_max]`.
#[inline]
pub fn ilif_surrogate(u: f64, d_max: i32) -> f64 {
    if (0.0..=d_max as f64).contains(&u) {
        1.0
    } else {
        0.0
    }
}

/// Rectangular surrogate of the Heaviside: `1/a` inside `|u - v_th| <= a/2`.
#[inline]
pub fn lif_surrogate(u: f64, p: &LIFParams) -> f64 {
    if (u - p.v_th).abs() <= p.a / 2.0 {
        1.0 / p.a
    } else {
        0.0
    }
}

/// Expands integer counts into binary micro-steps: each count `m` becomes
/// `m` ones followed by `d_max - m` zeros. Output time length is `T * d_max`.
pub fn unroll_to_binary(s: &SpikeTensor) -> Result<SpikeTensor> {
    s.validate()?;
    let shape = s.shape();
    let d = s.d_max() as usize;
    let slice = shape.slice_len();
    let out_shape = shape.with_t(shape.t * d);
    let mut out = vec![0i32; out_shape.numel()];
    for t in 0..shape.t {
        for i in 0..slice {
            let m = s.data()[t * slice + i] as usize;
            for k in 0..m {
                out[(t * d + k) * slice + i] = 1;
            }
        }
    }
    Ok(SpikeTensor::from_raw(out_shape, out, 1))
}

/// Mean spike count over time, unnormalized by `d_max`. Output has `T = 1`.
pub fn rate_decode(s: &SpikeTensor) -> Result<RealTensor> {
    let shape = s.shape();
    if shape.t == 0 {
        return Err(Error::dim("rate decoding needs T >= 1"));
    }
    let slice = shape.slice_len();
    let mut out = vec![0.0; slice];
    for t in 0..shape.t {
        for (o, &v) in out.iter_mut().zip(&s.data()[t * slice..(t + 1) * slice]) {
            *o += v as f64;
        }
    }
    let inv = 1.0 / shape.t as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(RealTensor::from_raw(shape.with_t(1), out))
}

/// How spiking layers compute their forward output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpikeMode {
    /// Quantized spikes (the real network).
    #[default]
    Integer,
    /// Straight-through relaxation: `clip(u, 0, D)` for I-LIF and the
    /// integral of the surrogate window for LIF. Its exact derivative is
    /// the surrogate, so finite differences on this mode check the
    /// backward pass.
    Relaxed,
}

/// Neuron model used by a spiking layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Neuron {
    Ilif(ILIFParams),
    Lif(LIFParams),
}

impl Default for Neuron {
    fn default() -> Self {
        Neuron::Ilif(ILIFParams::default())
    }
}

impl Neuron {
    pub fn d_max(&self) -> i32 {
        match self {
            Neuron::Ilif(p) => p.d_max,
            Neuron::Lif(_) => 1,
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            Neuron::Ilif(p) => p.tau,
            Neuron::Lif(p) => p.tau,
        }
    }

    pub fn v_th(&self) -> f64 {
        match self {
            Neuron::Ilif(p) => p.v_th,
            Neuron::Lif(p) => p.v_th,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Neuron::Ilif(p) => p.validate(),
            Neuron::Lif(p) => p.validate(),
        }
    }

    /// Output for membrane `u`. NaN membranes yield NaN so that numeric
    /// faults surface downstream instead of reading as silence.
    #[inline]
    pub fn fire(&self, u: f64, mode: SpikeMode) -> f64 {
        if u.is_nan() {
            return u;
        }
        match (self, mode) {
            (Neuron::Ilif(p), SpikeMode::Integer) => quantize(u, p.d_max) as f64,
            (Neuron::Ilif(p), SpikeMode::Relaxed) => u.clamp(0.0, p.d_max as f64),
            (Neuron::Lif(p), SpikeMode::Integer) => f64::from(u >= p.v_th),
            (Neuron::Lif(p), SpikeMode::Relaxed) => ((u - p.v_th) / p.a + 0.5).clamp(0.0, 1.0),
        }
    }

    #[inline]
    pub fn surrogate(&self, u: f64) -> f64 {
        match self {
            Neuron::Ilif(p) => ilif_surrogate(u, p.d_max),
            Neuron::Lif(p) => lif_surrogate(u, p),
        }
    }
}

/// Runs a spiking layer over every time step of `x`, starting from rest.
/// Returns the output spikes (as reals) and the membrane potentials `u`.
pub fn run_layer(x: &RealTensor, neuron: &Neuron, mode: SpikeMode) -> (RealTensor, Vec<f64>) {
    let shape = x.shape();
    let slice = shape.slice_len();
    let tau = neuron.tau();
    let v_th = neuron.v_th();
    let mut h = vec![0.0; slice];
    let mut out = vec![0.0; shape.numel()];
    let mut mem = vec![0.0; shape.numel()];
    for t in 0..shape.t {
        let base = t * slice;
        for i in 0..slice {
            let u = tau * h[i] + x.data()[base + i];
            let o = neuron.fire(u, mode);
            mem[base + i] = u;
            out[base + i] = o;
            h[i] = u - v_th * o;
        }
    }
    (RealTensor::from_raw(shape, out), mem)
}
