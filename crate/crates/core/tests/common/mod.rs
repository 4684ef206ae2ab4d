#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spikelab::graph::Graph;
use spikelab::network::{build_network, Network, NetworkSpec};
use spikelab::neuron::SpikeMode;
use spikelab::nn::{Builder, Ctx, Mode};
use spikelab::params::{ParamKind, ParamStore};
use spikelab::train::{forward_backward, Batch};
use spikelab::metrics::{lfsi_layer, LfsiConfig};
use spikelab::{RealTensor, Shape, SpikeTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, s: Shape, sigma: f64) -> RealTensor {
    let data = (0..s.numel())
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    RealTensor::from_vec(s, data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> RealTensor {
    RealTensor::from_vec(s, (0..s.numel()).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds something with a fresh store.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_, ChaCha8Rng>) -> T) -> (T, ParamStore) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let out = f(&mut Builder::new(&mut store, &mut r));
    (out, store)
}

/// Runs `f` on a fresh graph with `x` as input and returns the graph and
/// output variable.
pub fn run(
    store: &mut ParamStore,
    mode: Mode,
    x: &RealTensor,
    f: impl FnOnce(&mut Ctx<'_>, spikelab::graph::Var) -> spikelab::Result<spikelab::graph::Var>,
) -> (Graph, spikelab::graph::Var) {
    let mut g = Graph::new();
    let y = {
        let mut cx = Ctx::new(&mut g, store, mode).unwrap();
        let xv = cx.g.input(x.clone());
        f(&mut cx, xv).unwrap()
    };
    (g, y)
}

/// Randomizes tdBN parameters, running statistics and mixing scalars.
pub fn randomize_aux(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let leaf = name.rsplit('.').next().unwrap().to_string();
        let range = match leaf.as_str() {
            "lambda" => 0.5..1.5,
            "beta" | "running_mean" | "bias" => -0.5..0.5,
            "running_var" => 0.5..2.0,
            "w1" | "w2" | "c_lateral" | "c_resampled" => -1.5..1.5,
            _ => continue,
        };
        store.data_mut(id).iter_mut().for_each(|v| *v = rng.gen_range(range.clone()));
    }
}

/// Sets every parameter whose name ends with `suffix` to `value`.
pub fn set_all(store: &mut ParamStore, suffix: &str, value: f64) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(suffix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.data_mut(id).iter_mut().for_each(|v| *v = value);
    }
}

pub fn assert_close(a: &RealTensor, b: &RealTensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

/// Spike count of a soft-reset IF neuron (threshold 1) run for `d_max`
/// micro-steps from membrane `u + 0.5` with zero input.
pub fn if_unrolled_count(u: f64, d_max: i32) -> i32 {
    let mut m = u + 0.5;
    let mut count = 0;
    for _ in 0..d_max {
        if m >= 1.0 {
            count += 1;
            m -= 1.0;
        }
    }
    count
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn batch(seed: u64, shape: Shape, classes: usize) -> Batch {
    Batch {
        input: normal(&mut rng(seed), shape, 1.0),
        labels: (0..shape.n).map(|i| i % classes).collect(),
    }
}

pub fn loss_of(store: &mut ParamStore, mode: Mode, b: &Batch, net: &Network) -> f64 {
    forward_backward(net, store, b, mode).unwrap().loss
}

/// Smallest distance of any spiking-layer membrane from the clip kinks at
/// 0 and `D`.
pub fn kink_margin(g: &Graph) -> f64 {
    g.spike_records()
        .iter()
        .flat_map(|r| {
            let d = r.d_max as f64;
            g.value(r.input).data().iter().map(move |&u| u.min(d - u))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest relative error over a sample of coordinates of every trainable
/// parameter, using the relaxed forward pass with running statistics.
/// Statistics are calibrated on the batch and tdBN gains and biases are set
/// so that every membrane sits inside `(0, D)`. The pooled shortcut branch
/// gets zero weight since max pooling is not differentiable at ties.
pub fn relaxed_fd_worst(spec: &NetworkSpec, seed: u64, size: usize, stride: usize) -> f64 {
    let (net, mut store) = build_network(spec, &mut rng(seed)).unwrap();
    randomize_aux(&mut store, &mut rng(seed + 1));
    set_all(&mut store, "bn.lambda", 0.25);
    set_all(&mut store, "bn.beta", 1.0);
    set_all(&mut store, ".w2", 0.0);
    set_all(&mut store, "c_lateral", 0.5);
    set_all(&mut store, "c_resampled", 0.5);
    let b = batch(seed + 2, Shape::batched(spec.t_steps, 2, spec.in_channels, size, size), spec.num_classes);
    for _ in 0..60 {
        forward_backward(&net, &mut store, &b, Mode::train().with_spike(SpikeMode::Relaxed)).unwrap();
    }
    let mode = Mode::eval().with_spike(SpikeMode::Relaxed);
    let out = forward_backward(&net, &mut store, &b, mode).unwrap();
    let margin = kink_margin(&out.graph);
    assert!(margin > 0.05, "membrane within {margin} of a clip kink");
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(id, _)| id).collect();
    for id in ids {
        let g = out.grads.get(&id).cloned().unwrap_or_else(|| vec![0.0; store.data(id).len()]);
        for i in (0..g.len()).step_by(stride) {
            let w0 = store.data(id)[i];
            store.data_mut(id)[i] = w0 + eps;
            let lp = loss_of(&mut store, mode, &b, &net);
            store.data_mut(id)[i] = w0 - eps;
            let lm = loss_of(&mut store, mode, &b, &net);
            store.data_mut(id)[i] = w0;
            worst = worst.max(rel_err(g[i], (lp - lm) / (2.0 * eps)));
        }
    }
    worst
}

/// Position-by-position LFSI with explicit window loops.
pub fn lfsi_oracle(o: &SpikeTensor, side: usize) -> f64 {
    let s = o.shape();
    let r = side as isize / 2;
    let full = s.t as i32 * o.d_max();
    let sat = |n: usize, c: usize, i: usize, j: usize| (0..s.t).map(|t| o.get(t, n, c, i, j)).sum::<i32>() == full;
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h as isize {
                for j in 0..s.w as isize {
                    let (mut count, mut cells) = (0u32, 0usize);
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, x) = (i + di, j + dj);
                            if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
                                continue;
                            }
                            cells += 1;
                            count += u32::from(sat(n, c, y as usize, x as usize));
                        }
                    }
                    total += count as f64 / cells as f64;
                }
            }
        }
    }
    total / (s.n * s.c * s.h * s.w) as f64
}

pub fn random_spikes(rng: &mut impl Rng) -> SpikeTensor {
    let s = Shape::batched(rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..8), rng.gen_range(1..8));
    let d = rng.gen_range(1..5);
    // Bias towards the maximum so that saturation is common.
    let data = (0..s.numel())
        .map(|_| if rng.gen_bool(0.6) { d } else { rng.gen_range(0..=d) })
        .collect();
    SpikeTensor::from_vec(s, data, d).unwrap()
}

/// One square saturated cluster of side `k` inside an `h x h` plane.
pub fn cluster(h: usize, k: usize, top: usize, left: usize) -> SpikeTensor {
    let mut data = vec![0; h * h];
    for i in top..top + k {
        for j in left..left + k {
            data[i * h + j] = 2;
        }
    }
    SpikeTensor::from_vec(Shape::new(1, 1, h, h), data, 2).unwrap()
}

pub const WINDOWS: [usize; 5] = [1, 3, 5, 7, 9];

pub fn lfsi_by_window(o: &SpikeTensor) -> Vec<f64> {
    WINDOWS.iter().map(|&s| lfsi_layer(o, &LfsiConfig::new(s).unwrap()).unwrap()).collect()
}
