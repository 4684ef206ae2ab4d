//! Monte Carlo checks of the block algebra: decorrelation of residual
//! paths, membrane variance, variance accumulation along block chains,
//! dynamical isometry, and the saturation curve of an integer neuron.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::blocks::{Mds1Block, Mds1Shortcut, MsBlock, ShortcutStyle};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::ConvGeom;
use crate::neuron::{self, ILIFParams, Neuron};
use crate::nn::{Builder, Ctx, Lcb, Mode};
use crate::params::ParamStore;
use crate::tensor::{RealTensor, Shape};

/// Trials per parallel work unit. Fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 256;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal_tensor(rng: &mut impl Rng, shape: Shape, sigma: f64) -> RealTensor {
    let data = (0..shape.numel()).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    RealTensor::from_vec(shape, data).expect("length matches shape")
}

fn run_graph(
    store: &mut ParamStore,
    mode: Mode,
    x: RealTensor,
    f: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<(Graph, Var, Var)> {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, mode)?;
    let xv = cx.g.input(x);
    let y = f(&mut cx, xv)?;
    Ok((g, xv, y))
}

/// Sample variance with `n - 1` in the denominator.
fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct Prop1Config {
    pub depth: usize,
    pub kernel: usize,
    pub trials: usize,
    pub channels: usize,
    pub size: usize,
    pub t_steps: usize,
    pub seed: u64,
    /// Replace the zero-mean weights by a positive constant. The check is
    /// expected to fail.
    pub negative_control: bool,
}

impl Prop1Config {
    pub fn new(depth: usize, kernel: usize, trials: usize, seed: u64) -> Self {
        Self {
            depth,
            kernel,
            trials,
            channels: 16,
            size: 6,
            t_steps: 2,
            seed,
            negative_control: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Prop1Result {
    pub depth: usize,
    pub kernel: usize,
    pub trials: usize,
    pub positions: usize,
    /// Positions whose sample correlation lies within `bound`.
    pub within: usize,
    pub fraction: f64,
    pub bound: f64,
    pub max_abs_rho: f64,
    pub pass: bool,
}

#[derive(Clone, Default)]
struct Moments {
    x: Vec<f64>,
    y: Vec<f64>,
    xx: Vec<f64>,
    yy: Vec<f64>,
    xy: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
            xx: vec![0.0; n],
            yy: vec![0.0; n],
            xy: vec![0.0; n],
        }
    }

    fn push(&mut self, x: &[f64], y: &[f64]) {
        for i in 0..x.len() {
            self.x[i] += x[i];
            self.y[i] += y[i];
            self.xx[i] += x[i] * x[i];
            self.yy[i] += y[i] * y[i];
            self.xy[i] += x[i] * y[i];
        }
    }

    fn merge(&mut self, o: &Moments) {
        for (a, b) in [
            (&mut self.x, &o.x),
            (&mut self.y, &o.y),
            (&mut self.xx, &o.xx),
            (&mut self.yy, &o.yy),
            (&mut self.xy, &o.xy),
        ] {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }

    /// Pearson correlation per position; NaN where either side is constant.
    fn correlations(&self, n: f64) -> Vec<f64> {
        (0..self.x.len())
            .map(|i| {
                let cov = self.xy[i] - self.x[i] * self.y[i] / n;
                let vx = self.xx[i] - self.x[i] * self.x[i] / n;
                let vy = self.yy[i] - self.y[i] * self.y[i] / n;
                if vx <= 0.0 || vy <= 1e-12 * self.yy[i].max(1e-300) {
                    f64::NAN
                } else {
                    cov / (vx * vy).sqrt()
                }
            })
            .collect()
    }
}

/// Output of a stack of `depth` freshly initialized LCBs is uncorrelated
/// with its input, position by position.
///
/// Each trial draws new weights and a new `N(0, 1)` input; tdBN runs in
/// eval mode at its initial (identity) statistics. A position passes when
/// `|rho| <= 3 / sqrt(trials)`; the check passes when at least 99% do.
pub fn prop1_uncorrelated(cfg: &Prop1Config) -> Result<Prop1Result> {
    if cfg.depth == 0 || cfg.trials < 2 || cfg.channels == 0 || cfg.size == 0 || cfg.t_steps == 0 {
        return Err(Error::Argument(format!("invalid decorrelation setup {cfg:?}")));
    }
    let shape = Shape::new(cfg.t_steps, cfg.channels, cfg.size, cfg.size);
    let geom = ConvGeom::same(cfg.channels, cfg.channels, cfg.kernel, 1);
    geom.validate()?;
    let n = shape.numel();
    let trial = |i: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = stream_rng(cfg.seed, i as u64);
        let mut store = ParamStore::new();
        let lcbs = {
            let mut b = Builder::new(&mut store, &mut rng);
            (0..cfg.depth)
                .map(|d| Lcb::build(&mut b, &format!("lcb{d}"), Neuron::default(), geom, 1.0))
                .collect::<Result<Vec<_>>>()?
        };
        if cfg.negative_control {
            let c = 3.0 / geom.fan_in() as f64;
            for l in &lcbs {
                store.data_mut(l.conv.weight).iter_mut().for_each(|w| *w = c);
            }
        }
        let x = normal_tensor(&mut rng, shape, 1.0);
        let (g, _, y) = run_graph(&mut store, Mode::eval(), x.clone(), &|cx, mut h| {
            for l in &lcbs {
                h = l.forward(cx, h)?;
            }
            Ok(h)
        })?;
        Ok((x.into_vec(), g.value(y).data().to_vec()))
    };
    let chunks: Vec<Moments> = (0..cfg.trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(n);
            for i in c * CHUNK..((c + 1) * CHUNK).min(cfg.trials) {
                let (x, y) = trial(i)?;
                m.push(&x, &y);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(n);
    chunks.iter().for_each(|m| total.merge(m));
    let rho = total.correlations(cfg.trials as f64);
    let bound = 3.0 / (cfg.trials as f64).sqrt();
    let within = rho.iter().filter(|r| r.abs() <= bound).count();
    let fraction = within as f64 / n as f64;
    Ok(Prop1Result {
        depth: cfg.depth,
        kernel: cfg.kernel,
        trials: cfg.trials,
        positions: n,
        within,
        fraction,
        bound,
        max_abs_rho: rho.iter().map(|r| if r.is_nan() { f64::INFINITY } else { r.abs() }).fold(0.0, f64::max),
        pass: fraction >= 0.99,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Prop2Result {
    pub tau: f64,
    pub sigma: f64,
    pub samples: usize,
    /// `Var[x_t + tau * x_{t-1}] / Var[x]` with iid Gaussian `x`.
    pub ratio: f64,
    pub expected: f64,
    pub std_error: f64,
    pub within: bool,
    /// Same ratio for the second-step membrane of a real I-LIF neuron,
    /// where the carried state is `x_0 - V_th * o_0` rather than `x_0`.
    pub ilif_ratio: f64,
}

/// Membrane variance of a leaky integrator driven by iid inputs:
/// `Var[u] = (1 + tau^2) Var[x]`. Passes within three standard errors.
pub fn prop2_membrane_variance(tau: f64, sigma: f64, samples: usize, seed: u64) -> Result<Prop2Result> {
    if samples < 2 || !(sigma > 0.0) {
        return Err(Error::Argument(format!("need samples >= 2 and sigma > 0, got {samples}, {sigma}")));
    }
    let p = ILIFParams::new(tau, 1.0, neuron::DEFAULT_D_MAX)?;
    let mut rng = stream_rng(seed, 0);
    let mut xs = Vec::with_capacity(samples);
    let mut us = Vec::with_capacity(samples);
    let mut real = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x0 = sigma * rng.sample::<f64, _>(StandardNormal);
        let x1 = sigma * rng.sample::<f64, _>(StandardNormal);
        xs.push(x1);
        us.push(x1 + tau * x0);
        let (_, _, h) = neuron::ilif_scalar(0.0, x0, &p);
        let (u, _, _) = neuron::ilif_scalar(h, x1, &p);
        real.push(u);
    }
    let vx = sample_variance(&xs);
    let ratio = sample_variance(&us) / vx;
    let expected = 1.0 + tau * tau;
    let std_error = expected * (2.0 / (samples as f64 - 1.0)).sqrt();
    Ok(Prop2Result {
        tau,
        sigma,
        samples,
        ratio,
        expected,
        std_error,
        within: (ratio - expected).abs() <= 3.0 * std_error,
        ilif_ratio: sample_variance(&real) / vx,
    })
}

/// Per-block variances along a chain of blocks at initialization.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceTrace {
    pub style: ShortcutStyle,
    pub input_variance: f64,
    /// Variance of each block's output.
    pub outputs: Vec<f64>,
    /// Variance of each block's residual path.
    pub residuals: Vec<f64>,
    /// Variance of each block's shortcut path.
    pub shortcuts: Vec<f64>,
}

impl VarianceTrace {
    /// `max / min` over block outputs.
    pub fn spread(&self) -> f64 {
        let max = self.outputs.iter().copied().fold(f64::MIN, f64::max);
        let min = self.outputs.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }

    pub fn strictly_increasing(&self) -> bool {
        self.outputs.windows(2).all(|w| w[1] > w[0])
    }
}

/// Pushes a batch of `samples` standard-normal inputs through `blocks`
/// freshly initialized blocks using batch statistics.
///
/// `Ms` chains MS blocks with identity shortcuts; `Mds` chains MDS-Block1
/// with normalized 1x1 shortcuts and no inner MS blocks.
pub fn variance_accumulation(style: ShortcutStyle, blocks: usize, channels: usize, samples: usize, seed: u64) -> Result<VarianceTrace> {
    if blocks == 0 || channels == 0 || samples < 2 {
        return Err(Error::Argument("variance trace needs blocks >= 1 and samples >= 2".into()));
    }
    let (ch, size, t) = (channels, 4, 2);
    let neuron = Neuron::default();
    let mut rng = stream_rng(seed, 0);
    let mut store = ParamStore::new();
    enum Chain {
        Ms(Vec<MsBlock>),
        Mds(Vec<Mds1Block>),
    }
    let chain = {
        let mut b = Builder::new(&mut store, &mut rng);
        match style {
            ShortcutStyle::Ms => Chain::Ms(
                (0..blocks)
                    .map(|i| b.scoped(&format!("b{i}"), |b| MsBlock::build(b, neuron, ch)))
                    .collect::<Result<_>>()?,
            ),
            ShortcutStyle::Mds => Chain::Mds(
                (0..blocks)
                    .map(|i| b.scoped(&format!("b{i}"), |b| Mds1Block::build(b, neuron, ch, 0, ShortcutStyle::Mds)))
                    .collect::<Result<_>>()?,
            ),
        }
    };
    let x = normal_tensor(&mut rng, Shape::batched(t, samples, ch, size, size), 1.0);
    let mut trace = VarianceTrace {
        style,
        input_variance: x.variance(),
        outputs: Vec::new(),
        residuals: Vec::new(),
        shortcuts: Vec::new(),
    };
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &mut store, Mode::train().frozen_stats())?;
    let mut h = cx.g.input(x);
    for i in 0..blocks {
        let (r, s) = match &chain {
            Chain::Ms(v) => (v[i].residual(&mut cx, h)?, h),
            Chain::Mds(v) => {
                let blk = &v[i];
                let s = blk.residual.entry.spikes(&mut cx, h)?;
                let r = blk.residual.from_spikes(&mut cx, s)?;
                let sc = match &blk.shortcut {
                    Mds1Shortcut::Lcb(l) => l.from_spikes(&mut cx, s)?,
                    Mds1Shortcut::Identity => h,
                };
                (r, sc)
            }
        };
        h = cx.g.add(r, s)?;
        trace.residuals.push(cx.g.value(r).variance());
        trace.shortcuts.push(cx.g.value(s).variance());
        trace.outputs.push(cx.g.value(h).variance());
    }
    Ok(trace)
}

#[derive(Clone, Debug, Serialize)]
pub struct IsometryEstimate {
    /// `E[tr(J J^T)] / output_dim`.
    pub phi: f64,
    /// Mean squared input entry.
    pub alpha2: f64,
    pub samples: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Runs `passes` train-mode forwards on fresh `N(0, 1)` batches so that
/// the tdBN running statistics settle at the batch statistics.
pub fn calibrate_stats(
    store: &mut ParamStore,
    shape: Shape,
    passes: usize,
    rng: &mut impl Rng,
    f: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<()> {
    for _ in 0..passes {
        let x = normal_tensor(rng, shape, 1.0);
        run_graph(store, Mode::train(), x, f)?;
    }
    Ok(())
}

/// `tr(J J^T)` and output size of `f` at `x`, with `J` computed exactly
/// by one backward pass per output entry.
fn jacobian_trace(
    store: &mut ParamStore,
    mode: Mode,
    x: &RealTensor,
    f: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<(f64, usize)> {
    let (g, xv, y) = run_graph(store, mode, x.clone(), f)?;
    let ys = g.shape(y);
    let rows: Vec<f64> = (0..ys.numel())
        .into_par_iter()
        .map(|j| {
            let mut seed = RealTensor::zeros(ys);
            seed.data_mut()[j] = 1.0;
            let grads = g.backward(y, seed)?;
            Ok(grads.node(xv).map_or(0.0, |r| r.data().iter().map(|v| v * v).sum()))
        })
        .collect::<Result<_>>()?;
    Ok((rows.iter().sum(), ys.numel()))
}

fn mean_square(x: &RealTensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Estimates `phi(J J^T)` for the map `f` from exact Jacobians at
/// `samples` standard-normal inputs.
pub fn isometry_phi(
    store: &mut ParamStore,
    mode: Mode,
    shape: Shape,
    samples: usize,
    rng: &mut impl Rng,
    f: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<IsometryEstimate> {
    if samples == 0 {
        return Err(Error::Argument("isometry estimate needs samples >= 1".into()));
    }
    let mut acc = PhiAccumulator::default();
    for _ in 0..samples {
        let x = normal_tensor(rng, shape, 1.0);
        let (tr, m) = jacobian_trace(store, mode, &x, f)?;
        acc.push(tr, m, mean_square(&x));
    }
    Ok(acc.finish(shape.numel()))
}

#[derive(Default)]
struct PhiAccumulator {
    phi: f64,
    alpha2: f64,
    samples: usize,
    out_dim: usize,
}

impl PhiAccumulator {
    fn push(&mut self, trace: f64, out_dim: usize, alpha2: f64) {
        self.phi += trace / out_dim as f64;
        self.alpha2 += alpha2;
        self.samples += 1;
        self.out_dim = out_dim;
    }

    fn finish(self, input_dim: usize) -> IsometryEstimate {
        IsometryEstimate {
            phi: self.phi / self.samples as f64,
            alpha2: self.alpha2 / self.samples as f64,
            samples: self.samples,
            input_dim,
            output_dim: self.out_dim,
        }
    }
}

/// Isometry of freshly initialized MDS-Block1 instances and of their two
/// paths, all evaluated at the same inputs.
#[derive(Clone, Debug, Serialize)]
pub struct BlockIsometry {
    pub instances: usize,
    pub block: IsometryEstimate,
    pub residual: IsometryEstimate,
    pub shortcut: IsometryEstimate,
}

/// Builds `instances` independent MDS-Block1 (`channels`, `size x size`,
/// two time steps), calibrates their statistics on standard-normal
/// batches, and estimates the isometry in eval mode at `samples` inputs
/// per instance.
pub fn mds1_isometry(
    channels: usize,
    size: usize,
    depth: usize,
    instances: usize,
    samples: usize,
    seed: u64,
) -> Result<BlockIsometry> {
    if instances == 0 || samples == 0 {
        return Err(Error::Argument("isometry estimate needs instances and samples >= 1".into()));
    }
    let shape = Shape::new(2, channels, size, size);
    let mut acc: [PhiAccumulator; 3] = Default::default();
    for i in 0..instances {
        let mut rng = stream_rng(seed, i as u64);
        let mut store = ParamStore::new();
        let blk = {
            let mut b = Builder::new(&mut store, &mut rng);
            Mds1Block::build(&mut b, Neuron::default(), channels, depth, ShortcutStyle::Mds)?
        };
        let Mds1Shortcut::Lcb(sc) = &blk.shortcut else {
            unreachable!("MDS style builds an LCB shortcut")
        };
        let whole = |cx: &mut Ctx<'_>, x: Var| blk.forward(cx, x);
        let residual = |cx: &mut Ctx<'_>, x: Var| {
            let s = blk.residual.entry.spikes(cx, x)?;
            blk.residual.from_spikes(cx, s)
        };
        let shortcut = |cx: &mut Ctx<'_>, x: Var| sc.forward(cx, x);
        calibrate_stats(&mut store, Shape::batched(2, 32, channels, size, size), 60, &mut rng, &whole)?;
        for _ in 0..samples {
            let x = normal_tensor(&mut rng, shape, 1.0);
            let a2 = mean_square(&x);
            let paths: [&dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>; 3] = [&whole, &residual, &shortcut];
            for (a, f) in acc.iter_mut().zip(paths) {
                let (tr, m) = jacobian_trace(&mut store, Mode::eval(), &x, f)?;
                a.push(tr, m, a2);
            }
        }
    }
    let [block, residual, shortcut] = acc.map(|a| a.finish(shape.numel()));
    Ok(BlockIsometry {
        instances,
        block,
        residual,
        shortcut,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SaturationPoint {
    pub sigma: f64,
    pub empirical: f64,
    pub theory: f64,
    pub std_error: f64,
    pub within: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SaturationCurve {
    pub d_max: i32,
    pub trials: usize,
    pub points: Vec<SaturationPoint>,
    /// Empirical probability increases with sigma.
    pub monotone: bool,
}

/// Probability that a single-step integer neuron with input `N(0, sigma^2)`
/// emits `D` spikes: `P(x >= D - 1/2)`.
pub fn saturation_probability(sigma: f64, d_max: i32) -> Result<f64> {
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(n.sf(d_max as f64 - 0.5))
}

/// Empirical saturation probability at each `sigma`, compared with the
/// Gaussian tail within three binomial standard errors.
pub fn saturation_curve(sigmas: &[f64], d_max: i32, trials: usize, seed: u64) -> Result<SaturationCurve> {
    if trials == 0 {
        return Err(Error::Argument("saturation curve needs trials >= 1".into()));
    }
    let p = ILIFParams::new(neuron::DEFAULT_TAU, 1.0, d_max)?;
    let unit = CHUNK * 256;
    let mut points = Vec::with_capacity(sigmas.len());
    for (k, &sigma) in sigmas.iter().enumerate() {
        let theory = saturation_probability(sigma, d_max)?;
        let hits: usize = (0..trials.div_ceil(unit))
            .into_par_iter()
            .map(|c| {
                let mut rng = stream_rng(seed, ((k as u64) << 32) | c as u64);
                let n = unit.min(trials - c * unit);
                (0..n)
                    .filter(|_| {
                        let x = sigma * rng.sample::<f64, _>(StandardNormal);
                        neuron::ilif_scalar(0.0, x, &p).1 == d_max
                    })
                    .count()
            })
            .sum();
        let empirical = hits as f64 / trials as f64;
        let std_error = (theory * (1.0 - theory) / trials as f64).sqrt();
        points.push(SaturationPoint {
            sigma,
            empirical,
            theory,
            std_error,
            within: (empirical - theory).abs() <= 3.0 * std_error,
        });
    }
    let monotone = points.windows(2).all(|w| w[1].empirical > w[0].empirical);
    Ok(SaturationCurve {
        d_max,
        trials,
        points,
        monotone,
    })
}

/// Names accepted by [`run_checks`].
pub const CHECKS: [&str; 5] = ["prop1", "prop2", "variance", "isometry", "saturation"];

#[derive(Clone, Debug, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub prop1_trials: usize,
    pub prop2_samples: usize,
    pub variance_blocks: usize,
    pub variance_channels: usize,
    pub variance_samples: usize,
    pub isometry_instances: usize,
    pub isometry_samples: usize,
    pub saturation_trials: usize,
    pub negative_control: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prop1_trials: 10_000,
            prop2_samples: 100_000,
            variance_blocks: 8,
            variance_channels: 16,
            variance_samples: 1000,
            isometry_instances: 8,
            isometry_samples: 2,
            saturation_trials: 1_000_000,
            negative_control: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report structs serialize")
}

fn run_check(name: &str, cfg: &VerifyConfig) -> Result<CheckResult> {
    let (pass, detail) = match name {
        "prop1" => {
            let mut results = Vec::new();
            for depth in 1..=3 {
                for kernel in [1, 3] {
                    let mut c = Prop1Config::new(depth, kernel, cfg.prop1_trials, cfg.seed);
                    c.negative_control = cfg.negative_control;
                    results.push(prop1_uncorrelated(&c)?);
                }
            }
            (results.iter().all(|r| r.pass), to_value(&results))
        }
        "prop2" => {
            let r = prop2_membrane_variance(neuron::DEFAULT_TAU, 1.0, cfg.prop2_samples, cfg.seed)?;
            (r.within, to_value(&r))
        }
        "variance" => {
            let k = cfg.variance_blocks;
            let ms = variance_accumulation(ShortcutStyle::Ms, k, cfg.variance_channels, cfg.variance_samples, cfg.seed)?;
            let mds = variance_accumulation(ShortcutStyle::Mds, k, cfg.variance_channels, cfg.variance_samples, cfg.seed)?;
            let predicted = ms.input_variance + k as f64;
            let last = *ms.outputs.last().expect("k >= 1");
            let ms_ok = ms.strictly_increasing() && (last - predicted).abs() <= 0.15 * predicted;
            let mds_ok = mds.spread() < 2.0;
            let detail = serde_json::json!({
                "ms": ms, "ms_predicted_final": predicted, "ms_pass": ms_ok,
                "mds": mds, "mds_spread": mds.spread(), "mds_pass": mds_ok,
            });
            (ms_ok && mds_ok, detail)
        }
        "isometry" => {
            let r = mds1_isometry(8, 4, 0, cfg.isometry_instances, cfg.isometry_samples, cfg.seed)?;
            ((0.7..=1.3).contains(&r.block.phi), to_value(&r))
        }
        "saturation" => {
            let c = saturation_curve(&[1.0, 2.0, 3.0], neuron::DEFAULT_D_MAX, cfg.saturation_trials, cfg.seed)?;
            (c.monotone && c.points.iter().all(|p| p.within), to_value(&c))
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown check {other:?}; expected one of {}",
                CHECKS.join(", ")
            )))
        }
    };
    Ok(CheckResult {
        name: name.to_string(),
        pass,
        detail,
    })
}

/// Runs the named checks in order. Unknown names are rejected before any
/// check runs.
pub fn run_checks(names: &[String], cfg: &VerifyConfig) -> Result<VerifyReport> {
    if let Some(bad) = names.iter().find(|n| !CHECKS.contains(&n.as_str())) {
        return Err(Error::Argument(format!(
            "unknown check {bad:?}; expected one of {}",
            CHECKS.join(", ")
        )));
    }
    let checks = names.iter().map(|n| run_check(n, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        seed: cfg.seed,
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}
