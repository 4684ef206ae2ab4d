//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line to
//! stderr (outside the test harness capture) with its wall time and budget,
//! and the test fails if any criterion does.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use spikelab::blocks::{Mds2Block, ShortcutStyle};
use spikelab::layers::{conv2d, fold_tdbn_into_conv, tdbn_forward, BnMode, ConvGeom, ConvSpec, TdBNParams};
use spikelab::metrics::{conv_sops, energy_mj, lfsi_layer, LfsiConfig};
use spikelab::network::NetworkSpec;
use spikelab::neuron::{quantize, Neuron};
use spikelab::nn::Mode;
use spikelab::params::ParamStore;
use spikelab::train::{train_toy, Task, TrainConfig};
use spikelab::verify::*;
use spikelab::{Shape, SpikeTensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn neuron_equivalence() -> Outcome {
    let mut r = rng(101);
    let mut mismatches = 0;
    for i in 0..10_000 {
        let d = r.gen_range(1..=8);
        // Every fourth membrane sits on a rounding tie.
        let u = if i % 4 == 0 {
            r.gen_range(-3..2 * d + 3) as f64 / 2.0
        } else {
            r.gen_range(-2.0..d as f64 + 2.0)
        };
        if quantize(u, d) != if_unrolled_count(u, d) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 10000 membranes"))
}

fn tdbn_folding() -> Outcome {
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (cin, cout) = (r.gen_range(1..5), r.gen_range(1..5));
        let geom = ConvGeom::same(cin, cout, [1, 3, 5][r.gen_range(0..3)], r.gen_range(1..3));
        let w = (0..cout * cin * geom.kernel * geom.kernel).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b = (0..cout).map(|_| r.gen_range(-1.0..1.0)).collect();
        let conv = ConvSpec::new(geom, w, b).unwrap();
        let mut p = TdBNParams::new(cout, 1.0);
        p.alpha = r.gen_range(0.5..1.5);
        p.mode = BnMode::Eval;
        for c in 0..cout {
            p.lambda[c] = r.gen_range(0.2..2.0);
            p.beta[c] = r.gen_range(-1.0..1.0);
            p.var_inf[c] = r.gen_range(0.1..3.0);
            p.mu_inf[c] = r.gen_range(-1.0..1.0);
        }
        let hw = r.gen_range(3..9);
        let x = normal(&mut r, Shape::batched(2, 2, cin, hw, hw), 1.0);
        let unfused = tdbn_forward(&conv2d(&x, &conv).unwrap(), &mut p.clone()).unwrap();
        let folded = conv2d(&x, &fold_tdbn_into_conv(&conv, &p).unwrap()).unwrap();
        worst = worst.max(unfused.max_abs_diff(&folded));
    }
    outcome(worst <= 1e-5, format!("max |delta| = {worst:.3e} over 100 pairs"))
}

fn mds2_reparameterization() -> Outcome {
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut r = rng(3000 + trial);
        let depth = (trial % 2) as usize;
        let (blk, mut store) = build(trial, |b| Mds2Block::build(b, Neuron::default(), 4, 8, depth, ShortcutStyle::Mds).unwrap());
        randomize_aux(&mut store, &mut r);
        let x = normal(&mut r, Shape::batched(2, 2, 4, 8, 8), 2.0);
        let (g1, y1) = run(&mut store, Mode::eval(), &x, |cx, v| blk.forward(cx, v));
        let (g2, y2) = run(&mut store, Mode::inference(), &x, |cx, v| blk.forward(cx, v));
        worst = worst.max(g1.value(y1).max_abs_diff(g2.value(y2)));
    }
    outcome(worst <= 1e-5, format!("max |delta| = {worst:.3e} over 100 blocks"))
}

fn residual_decorrelation() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for depth in 1..=3 {
        for kernel in [1, 3] {
            let r = prop1_uncorrelated(&Prop1Config::new(depth, kernel, 10_000, 40 + depth as u64)).unwrap();
            pass &= r.pass && r.fraction >= 0.99;
            parts.push(format!("d{depth}k{kernel}={:.4}", r.fraction));
        }
    }
    let mut neg = Prop1Config::new(2, 3, 10_000, 44);
    neg.negative_control = true;
    let n = prop1_uncorrelated(&neg).unwrap();
    pass &= !n.pass;
    parts.push(format!("negative control {:.4}", n.fraction));
    outcome(pass, format!("fraction within 3/sqrt(N): {}", parts.join(" ")))
}

fn variance_trend() -> Outcome {
    let k = 8;
    let ms = variance_accumulation(ShortcutStyle::Ms, k, 16, 1000, 55).unwrap();
    let mds = variance_accumulation(ShortcutStyle::Mds, k, 16, 1000, 55).unwrap();
    let predicted = ms.input_variance + k as f64;
    let last = ms.outputs[k - 1];
    let ms_ok = ms.strictly_increasing() && (last - predicted).abs() <= 0.15 * predicted;
    let mds_ok = mds.spread() < 2.0;
    outcome(
        ms_ok && mds_ok,
        format!(
            "MS increasing={} final {last:.3} vs predicted {predicted:.3}; MDS max/min {:.3}",
            ms.strictly_increasing(),
            mds.spread()
        ),
    )
}

fn saturation() -> Outcome {
    let c = saturation_curve(&[1.0, 2.0, 3.0], 4, 1_000_000, 66).unwrap();
    let reference = [2.33e-4, 4.01e-2, 1.22e-1];
    let theory_ok = c.points.iter().zip(reference).all(|(p, r)| (p.theory - r).abs() <= 0.005 * r);
    let pass = theory_ok && c.monotone && c.points.iter().all(|p| p.within);
    let detail = c
        .points
        .iter()
        .map(|p| format!("sigma={} {:.4e} vs {:.4e} (3se {:.1e})", p.sigma, p.empirical, p.theory, 3.0 * p.std_error))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn lfsi_correctness() -> Outcome {
    let mut r = rng(77);
    let mut oracle_ok = true;
    for _ in 0..100 {
        let o = random_spikes(&mut r);
        for side in [1, 3, 5] {
            oracle_ok &= lfsi_layer(&o, &LfsiConfig::new(side).unwrap()).unwrap() == lfsi_oracle(&o, side);
        }
    }
    let cfg = LfsiConfig::default();
    let s = Shape::new(2, 3, 6, 6);
    let full = lfsi_layer(&SpikeTensor::from_vec(s, vec![4; s.numel()], 4).unwrap(), &cfg).unwrap();
    let none = lfsi_layer(&SpikeTensor::zeros(s, 4), &cfg).unwrap();
    let mut c = vec![0; 25];
    c[12] = 4;
    let center = lfsi_layer(&SpikeTensor::from_vec(Shape::new(1, 1, 5, 5), c, 4).unwrap(), &cfg).unwrap();
    let refs_ok = full == 1.0 && none == 0.0 && (center - 0.04).abs() < 1e-15;
    let margin = 2 * (WINDOWS[WINDOWS.len() - 1] / 2);
    let mut monotone = true;
    for _ in 0..50 {
        let h = r.gen_range(20..30);
        let k = r.gen_range(1..5);
        let top = r.gen_range(margin..=h - k - margin);
        let left = r.gen_range(margin..=h - k - margin);
        let v = lfsi_by_window(&cluster(h, k, top, left));
        monotone &= v.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }
    outcome(
        oracle_ok && refs_ok && monotone,
        format!("oracle={oracle_ok} all={full} none={none} center={center} non-increasing in S={monotone}"),
    )
}

fn operation_counts() -> Outcome {
    let sops = conv_sops(0.5, 1, &ConvGeom::same(2, 4, 3, 1), 8, 8);
    let e_ac = energy_mj(1e9, 0.0);
    let e_mac = energy_mj(0.0, 2e9);
    outcome(
        sops == 2304.0 && e_ac == 0.9 && e_mac == 4.6,
        format!("SOPs {sops}, 1e9 SOPs -> {e_ac} mJ, 2e9 FLOPs -> {e_mac} mJ"),
    )
}

fn gradient_integrity() -> Outcome {
    let plain = relaxed_fd_worst(&NetworkSpec::toy(1, 2, 4, &[6, 8], 1), 7, 16, 3);
    let fused = relaxed_fd_worst(&NetworkSpec::toy(1, 2, 4, &[4, 4, 4], 0).with_fusion(2), 11, 16, 3);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 9,
        train_size: 48,
        test_size: 16,
        image_size: 16,
        ..TrainConfig::default()
    };
    let spec = NetworkSpec::toy(1, 2, 4, &[8, 8], 1);
    let a = train_toy(&spec, Task::TwoClass, &cfg).unwrap();
    let b = train_toy(&spec, Task::TwoClass, &cfg).unwrap();
    let same_params = a.store.iter().zip(b.store.iter()).all(|((_, p), (_, q))| p.data == q.data);
    let deterministic = same_params && a.history.to_csv().unwrap() == b.history.to_csv().unwrap();
    outcome(
        plain <= 1e-4 && fused <= 1e-4 && deterministic,
        format!("worst relative error {plain:.2e} (toy), {fused:.2e} (fused); deterministic={deterministic}"),
    )
}

fn toy_comparison() -> Outcome {
    let mds = NetworkSpec::toy(1, 2, 8, &[16, 32], 1);
    let ms = NetworkSpec::toy(1, 2, 8, &[18, 33], 1).with_shortcut(ShortcutStyle::Ms);
    let (pm, ps) = (param_count(&mds), param_count(&ms));
    let matched = pm.abs_diff(ps) * 100 <= pm;
    let mut wins = 0;
    let mut accurate = true;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let a = train_toy(&mds, Task::TwoClass, &cfg).unwrap();
        let b = train_toy(&ms, Task::TwoClass, &cfg).unwrap();
        let (ra, rb) = (a.history.rows.last().unwrap(), b.history.rows.last().unwrap());
        accurate &= ra.acc >= 0.9 && rb.acc >= 0.9;
        if ra.lfsi < rb.lfsi {
            wins += 1;
        }
        rows.push(format!("s{seed} acc {:.3}/{:.3} lfsi {:.2e}/{:.2e}", ra.acc, rb.acc, ra.lfsi, rb.lfsi));
    }
    outcome(
        matched && accurate && wins >= 4,
        format!("params {pm}/{ps}, MDS lower LFSI in {wins}/5 (MDS/MS): {}", rows.join("; ")),
    )
}

fn param_count(spec: &NetworkSpec) -> usize {
    let (_, store) = spikelab::network::build_network(spec, &mut rng(0)).unwrap();
    store
        .iter()
        .filter(|(_, p)| p.kind == spikelab::params::ParamKind::Trainable)
        .map(|(_, p)| p.data.len())
        .sum()
}

fn block_isometry() -> Outcome {
    let r = mds1_isometry(8, 4, 0, 8, 2, 88).unwrap();
    let mut store = ParamStore::new();
    let mut g = rng(89);
    let s = Shape::new(2, 2, 3, 3);
    let id = isometry_phi(&mut store, Mode::eval(), s, 2, &mut g, &|_, x| Ok(x)).unwrap();
    let two = isometry_phi(&mut store, Mode::eval(), s, 2, &mut g, &|cx, x| Ok(cx.g.scale(x, 2.0, None))).unwrap();
    let sanity = id.phi == 1.0 && two.phi == 4.0;
    let phi = r.block.phi;
    outcome(
        (0.7..=1.3).contains(&phi) && sanity && r.block.input_dim <= 256,
        format!(
            "phi {phi:.3} (residual {:.3}, shortcut {:.3}) on {} dims; identity {} scale-2 {}",
            r.residual.phi, r.shortcut.phi, r.block.input_dim, id.phi, two.phi
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, u64, fn() -> Outcome); 11] = [
        ("neuron equivalence", 1, neuron_equivalence),
        ("tdBN folding", 5, tdbn_folding),
        ("MDS-Block2 reparameterization", 10, mds2_reparameterization),
        ("residual decorrelation", 60, residual_decorrelation),
        ("variance accumulation trend", 120, variance_trend),
        ("saturation probabilities", 30, saturation),
        ("LFSI correctness", 10, lfsi_correctness),
        ("SOPs and energy", 1, operation_counts),
        ("gradient integrity", 60, gradient_integrity),
        ("toy MDS vs MS comparison", 1200, toy_comparison),
        ("block isometry", 60, block_isometry),
    ];
    let mut failed = Vec::new();
    // libtest leaves its "test ... " prefix open on stderr.
    let _ = writeln!(std::io::stderr());
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        let _ = writeln!(
            std::io::stderr(),
            "{} {:>2} {name}: {} [{:.2}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(format!("{} {name}", i + 1));
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
