//! C interface to `spikelab`.
//!
//! Every fallible call returns an [`SlStatus`]. On failure the message is
//! kept per thread and can be read with [`sl_last_error`]. Networks are
//! opaque [`SlNetwork`] handles released with [`sl_network_free`], and
//! strings returned by the library are released with [`sl_string_free`].
//! Panics never cross the boundary; they surface as `SL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikelab::codec::direct_encode;
use spikelab::graph::Graph;
use spikelab::metrics::{count_flops, energy_mj, lfsi_layer, LfsiConfig, MetricsReport};
use spikelab::network::{build_network, Network, NetworkSpec};
use spikelab::neuron::{ilif_scalar, ILIFParams};
use spikelab::nn::{Ctx, Mode};
use spikelab::params::{ParamKind, ParamStore};
use spikelab::{Error, RealTensor, Shape, SpikeTensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    Argument = 2,
    Dimension = 3,
    Numeric = 4,
    Config = 5,
    Format = 6,
    Io = 7,
    Internal = 8,
    Panic = 9,
}

/// A network and its parameters.
pub struct SlNetwork {
    net: Network,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SlStatus {
    match e {
        Error::Dimension(_) => SlStatus::Dimension,
        Error::Numeric { .. } | Error::Training(_) => SlStatus::Numeric,
        Error::Config(_) | Error::Parse { .. } | Error::Record { .. } => SlStatus::Config,
        Error::Argument(_) | Error::Invariant(_) | Error::Undefined(_) => SlStatus::Argument,
        Error::Format(_) => SlStatus::Format,
        Error::Io { .. } => SlStatus::Io,
        _ => SlStatus::Internal,
    }
}

/// Runs `f`, records its error message and converts the outcome to a
/// status.
fn guard(f: impl FnOnce() -> Result<(), (SlStatus, String)>) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SlStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SlStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SlStatus, String) {
    (SlStatus::NullPointer, format!("{what} is NULL"))
}

fn arg(msg: impl Into<String>) -> (SlStatus, String) {
    (SlStatus::Argument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (SlStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], (SlStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(format!("{what} is not UTF-8")))
}

fn shape5(dims: *const usize) -> Result<Shape, (SlStatus, String)> {
    let d = unsafe { slice(dims, 5, "dims")? };
    if d.contains(&0) {
        return Err((SlStatus::Dimension, format!("dims {d:?} contain a zero")));
    }
    Ok(Shape::batched(d[0], d[1], d[2], d[3], d[4]))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// One I-LIF time step over `n` neurons. Writes integer spikes to
/// `spikes_out` and the post-reset membrane to `h_out`. `h_out` may alias
/// `h`.
///
/// # Safety
/// Every pointer must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn sl_ilif_step(
    h: *const f64,
    x: *const f64,
    n: usize,
    tau: f64,
    v_th: f64,
    d_max: i32,
    spikes_out: *mut i32,
    h_out: *mut f64,
) -> SlStatus {
    guard(|| {
        let p = ILIFParams::new(tau, v_th, d_max).map_err(lib)?;
        let hs = slice(h, n, "h")?.to_vec();
        let xs = slice(x, n, "x")?;
        if let Some(i) = hs.iter().chain(xs).position(|v| !v.is_finite()) {
            return Err((SlStatus::Numeric, format!("non-finite input at index {}", i % n.max(1))));
        }
        let spikes = slice_mut(spikes_out, n, "spikes_out")?;
        let out = slice_mut(h_out, n, "h_out")?;
        for i in 0..n {
            let (_, o, h2) = ilif_scalar(hs[i], xs[i], &p);
            spikes[i] = o;
            out[i] = h2;
        }
        Ok(())
    })
}

/// LFSI of one layer's spike counts laid out `(T, N, C, H, W)` row-major.
///
/// # Safety
/// `dims` must point to 5 values and `spikes` to their product.
#[no_mangle]
pub unsafe extern "C" fn sl_lfsi_layer(
    spikes: *const i32,
    dims: *const usize,
    d_max: i32,
    window: usize,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = shape5(dims)?;
        let data = slice(spikes, shape.numel(), "spikes")?.to_vec();
        let t = SpikeTensor::from_vec(shape, data, d_max).map_err(lib)?;
        let cfg = LfsiConfig::new(window).map_err(lib)?;
        *out = lfsi_layer(&t, &cfg).map_err(lib)?;
        Ok(())
    })
}

/// Energy in millijoules of `sops` synaptic operations and `flops`
/// real-valued floating point operations.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_energy_mj(sops: f64, flops: f64, out: *mut f64) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(sops >= 0.0 && flops >= 0.0 && sops.is_finite() && flops.is_finite()) {
            return Err(arg(format!("operation counts must be finite and >= 0, got {sops}, {flops}")));
        }
        *out = energy_mj(sops, flops);
        Ok(())
    })
}

fn into_handle(spec: &NetworkSpec, seed: u64, out: *mut *mut SlNetwork) -> Result<(), (SlStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    let (net, store) = build_network(spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(lib)?;
    unsafe { *out = Box::into_raw(Box::new(SlNetwork { net, store })) };
    Ok(())
}

/// Freshly initialized MDSNet of the given depth (10, 18, 34 or 104).
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_network_mdsnet(
    depth: usize,
    width: f64,
    in_channels: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut SlNetwork,
) -> SlStatus {
    guard(|| {
        let spec = NetworkSpec::mdsnet(depth, width, in_channels, num_classes).map_err(lib)?;
        into_handle(&spec, seed, out)
    })
}

/// Freshly initialized network from a JSON network spec.
///
/// # Safety
/// `json` must be NUL-terminated and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_network_from_json(json: *const c_char, seed: u64, out: *mut *mut SlNetwork) -> SlStatus {
    guard(|| {
        let text = c_str(json, "json")?;
        let spec: NetworkSpec =
            serde_json::from_str(text).map_err(|e| (SlStatus::Config, format!("invalid network spec: {e}")))?;
        into_handle(&spec, seed, out)
    })
}

/// Network stored in a model file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_network_load(path: *const c_char, out: *mut *mut SlNetwork) -> SlStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (net, store) = spikelab::io::load_model(path).map_err(lib)?;
        *out = Box::into_raw(Box::new(SlNetwork { net, store }));
        Ok(())
    })
}

/// Releases a network. NULL is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sl_network_free(net: *mut SlNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `net` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_network_param_count(net: *const SlNetwork, out: *mut usize) -> SlStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = net
            .store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(_, p)| p.data.len())
            .sum();
        Ok(())
    })
}

/// Eval-mode forward pass on `input` laid out `(T, N, C, H, W)`. A single
/// frame (`T = 1`) is direct-encoded to the network's time steps. On
/// success `*json_out` holds the metrics report, to be released with
/// [`sl_string_free`].
///
/// # Safety
/// `dims` must point to 5 values, `input` to their product, and
/// `json_out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn sl_network_simulate(
    net: *mut SlNetwork,
    input: *const f64,
    dims: *const usize,
    lfsi_window: usize,
    json_out: *mut *mut c_char,
) -> SlStatus {
    guard(|| {
        let h = net.as_mut().ok_or_else(|| null("net"))?;
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        let shape = shape5(dims)?;
        let data = slice(input, shape.numel(), "input")?.to_vec();
        let cfg = LfsiConfig::new(lfsi_window).map_err(lib)?;
        let mut x = RealTensor::from_vec(shape, data).map_err(lib)?;
        let t_steps = h.net.spec.t_steps;
        if shape.t == 1 && t_steps > 1 {
            x = direct_encode(&x, t_steps).map_err(lib)?;
        }
        let input_shape = x.shape();
        let mut g = Graph::new();
        {
            let mut cx = Ctx::new(&mut g, &mut h.store, Mode::eval()).map_err(lib)?;
            let xv = cx.g.input(x);
            h.net.forward(&mut cx, xv).map_err(lib)?;
        }
        let flops = count_flops(&h.net.spec, input_shape).map_err(lib)?;
        let report = MetricsReport::from_graph(&g, &cfg, flops).map_err(lib)?;
        let json = serde_json::to_string(&report).map_err(|e| (SlStatus::Internal, e.to_string()))?;
        *json_out = CString::new(json).map_err(|e| (SlStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
