mod common;

use std::collections::BTreeMap;

use common::*;
use spikelab::graph::Graph;
use spikelab::layers::ConvGeom;
use spikelab::network::{build_network, NetworkSpec};
use spikelab::nn::{Lcb, Mode};
use spikelab::params::{ParamKind, ParamStore};
use spikelab::train::{forward_backward, forward_backward_with, sgd_step, train_toy, OptimState, Task, TrainConfig};
use spikelab::{Error, RealTensor, Shape};

fn small_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        train_size: 32,
        test_size: 16,
        image_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_weight_lcb_loss_is_bias_loss() {
    let (lcb, mut store) = build(1, |b| Lcb::build(b, "l", ilif(), ConvGeom::same(1, 3, 3, 1), 1.0).unwrap());
    set_all(&mut store, "conv.weight", 0.0);
    let beta = [0.3, -0.2, 1.1];
    store.data_mut(lcb.bn.beta).copy_from_slice(&beta);
    let b = batch(2, Shape::batched(2, 4, 1, 4, 4), 3);
    let out = forward_backward_with(&mut store, Mode::eval(), &b, |cx, x| {
        let y = lcb.forward(cx, x)?;
        Ok(cx.g.mean_thw(y))
    })
    .unwrap();
    let lse = beta.iter().map(|v| v.exp()).sum::<f64>().ln();
    let expect = b.labels.iter().map(|&l| lse - beta[l]).sum::<f64>() / 4.0;
    assert!((out.loss - expect).abs() < 1e-12, "{} vs {expect}", out.loss);
}

fn ilif() -> spikelab::neuron::Neuron {
    spikelab::neuron::Neuron::default()
}

#[test]
fn conv_weight_grads_match_finite_differences_with_frozen_spikes() {
    let ((a, c), mut store) = build(3, |b| {
        let a = Lcb::build(b, "a", ilif(), ConvGeom::same(2, 4, 3, 1), 1.0).unwrap();
        let c = Lcb::build(b, "c", ilif(), ConvGeom::same(4, 3, 3, 1), 1.0).unwrap();
        (a, c)
    });
    randomize_aux(&mut store, &mut rng(4));
    let b = batch(5, Shape::batched(2, 3, 2, 5, 5), 3);
    let mode = Mode::train().frozen_stats();
    let model = |cx: &mut spikelab::nn::Ctx<'_>, x| {
        let h = a.forward(cx, x)?;
        let y = c.forward(cx, h)?;
        Ok(cx.g.mean_thw(y))
    };
    let out = forward_backward_with(&mut store, mode, &b, model).unwrap();
    let spikes_of = |g: &Graph| -> Vec<RealTensor> { g.spike_records().iter().map(|r| g.value(r.output).clone()).collect() };
    let base_spikes = spikes_of(&out.graph);
    let grad = &out.grads[&c.conv.weight];
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    for i in (0..grad.len()).step_by(5) {
        let w0 = store.data(c.conv.weight)[i];
        let eval = |w: f64, store: &mut ParamStore| {
            store.data_mut(c.conv.weight)[i] = w;
            let o = forward_backward_with(store, mode, &b, model).unwrap();
            assert_eq!(spikes_of(&o.graph), base_spikes, "perturbation moved a spike");
            o.loss
        };
        let lp = eval(w0 + eps, &mut store);
        let lm = eval(w0 - eps, &mut store);
        store.data_mut(c.conv.weight)[i] = w0;
        worst = worst.max(rel_err(grad[i], (lp - lm) / (2.0 * eps)));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn relaxed_network_grads_match_finite_differences() {
    let spec = NetworkSpec::toy(1, 2, 4, &[6, 8], 1);
    let worst = relaxed_fd_worst(&spec, 7, 16, 3);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn relaxed_fused_network_grads_match_finite_differences() {
    let spec = NetworkSpec::toy(1, 2, 4, &[4, 4, 4], 0).with_fusion(2);
    let worst = relaxed_fd_worst(&spec, 11, 16, 3);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn maxpool_routes_gradient_to_window_maximum() {
    let s = Shape::batched(1, 1, 1, 2, 4);
    let x = RealTensor::from_vec(s, vec![0.1, 0.9, 0.3, 0.2, 0.5, 0.4, 0.8, 0.7]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = g.maxpool2(xv).unwrap();
    let up = RealTensor::from_vec(Shape::batched(1, 1, 1, 1, 2), vec![2.0, -3.0]).unwrap();
    let grads = g.backward(y, up).unwrap();
    assert_eq!(grads.node(xv).unwrap().data(), [0.0, 2.0, 0.0, 0.0, 0.0, 0.0, -3.0, 0.0]);
}

#[test]
fn fused_constant_gradient_is_inner_product() {
    let mut store = ParamStore::new();
    let c = store.add("c", vec![1], vec![0.7], ParamKind::Trainable);
    let s = Shape::batched(2, 1, 3, 2, 2);
    let x = normal(&mut rng(1), s, 1.0);
    let up = normal(&mut rng(2), s, 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.scale(xv, 0.7, Some(c));
    let grads = g.backward(y, up.clone()).unwrap();
    let dot: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
    assert!((grads.param(c).unwrap()[0] - dot).abs() < 1e-12);
    assert_close(grads.node(xv).unwrap(), &up.map(|v| 0.7 * v), 1e-15);
}

#[test]
fn numeric_error_names_the_layer() {
    let spec = NetworkSpec::toy(1, 2, 4, &[4, 4], 0);
    let (net, mut store) = build_network(&spec, &mut rng(0)).unwrap();
    let id = store.iter().find(|(_, p)| p.name.starts_with("stage2") && p.name.ends_with("beta")).unwrap().0;
    store.data_mut(id)[0] = f64::NAN;
    let b = batch(1, Shape::batched(2, 2, 1, 8, 8), 2);
    match forward_backward(&net, &mut store, &b, Mode::eval()) {
        Err(Error::Numeric { layer, .. }) => assert!(layer.starts_with("stage2"), "{layer}"),
        other => panic!("expected numeric error, got {:?}", other.map(|o| o.loss)),
    }
}

#[test]
fn sgd_contract() {
    let mut store = ParamStore::new();
    let w = store.add("w", vec![2], vec![1.0, -2.0], ParamKind::Trainable);
    let zero: BTreeMap<_, _> = [(w, vec![0.0, 0.0])].into();
    let mut opt = OptimState::new(0.1, 0.9, 0.0).unwrap();
    sgd_step(&mut store, &zero, &mut opt).unwrap();
    assert_eq!(store.data(w), [1.0, -2.0]);

    let ones: BTreeMap<_, _> = [(w, vec![1.0, 1.0])].into();
    let mut opt = OptimState::new(0.1, 0.9, 0.0).unwrap();
    sgd_step(&mut store, &ones, &mut opt).unwrap();
    let before = store.data(w)[0];
    sgd_step(&mut store, &ones, &mut opt).unwrap();
    assert!((before - store.data(w)[0] - 0.19).abs() < 1e-12);
    assert!((opt.velocity(w).unwrap()[0] - 1.9).abs() < 1e-12);

    let short: BTreeMap<_, _> = [(w, vec![1.0])].into();
    assert!(matches!(sgd_step(&mut store, &short, &mut opt), Err(Error::Dimension(_))));
    assert!(matches!(OptimState::new(0.0, 0.0, 0.0), Err(Error::Config(_))));
    assert!(matches!(OptimState::new(0.1, 1.0, 0.0), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic() {
    let spec = NetworkSpec::toy(1, 2, 4, &[8, 8], 1);
    let a = train_toy(&spec, Task::TwoClass, &small_cfg(21, 2)).unwrap();
    let b = train_toy(&spec, Task::TwoClass, &small_cfg(21, 2)).unwrap();
    assert_eq!(a.history.to_csv().unwrap(), b.history.to_csv().unwrap());
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.data, q.data, "{}", p.name);
    }
    let c = train_toy(&spec, Task::TwoClass, &small_cfg(22, 2)).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn history_csv_layout() {
    let spec = NetworkSpec::toy(1, 3, 4, &[8, 8], 0);
    let m = train_toy(&spec, Task::BlobCount, &small_cfg(1, 2)).unwrap();
    let csv = m.history.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,acc,firing_rate,lfsi");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,"));
    assert!(m.history.rows.iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.acc)));
}

#[test]
fn untrained_network_is_at_chance() {
    let spec = NetworkSpec::toy(1, 2, 8, &[16, 32], 1);
    let seeds = 12;
    let mut total = 0.0;
    for seed in 0..seeds {
        let cfg = TrainConfig {
            test_size: 400,
            ..small_cfg(seed, 0)
        };
        let m = train_toy(&spec, Task::TwoClass, &cfg).unwrap();
        assert_eq!(m.history.rows.len(), 1);
        total += m.history.rows[0].acc;
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean accuracy over seeds {mean}");
}

#[test]
fn divergence_is_a_training_error() {
    let spec = NetworkSpec::toy(1, 2, 4, &[8, 8], 0);
    let cfg = TrainConfig {
        lr: 1e8,
        momentum: 0.0,
        ..small_cfg(0, 3)
    };
    assert!(matches!(train_toy(&spec, Task::TwoClass, &cfg), Err(Error::Training(_))));
    let wrong = NetworkSpec::toy(1, 3, 4, &[8, 8], 0);
    assert!(matches!(train_toy(&wrong, Task::TwoClass, &small_cfg(0, 1)), Err(Error::Config(_))));
}

fn norm(t: &RealTensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn mdsnet_gradients_do_not_explode_at_init() {
    for depth in [10, 18] {
        let spec = NetworkSpec::mdsnet(depth, 0.125, 2, 2).unwrap();
        let (net, mut store) = build_network(&spec, &mut rng(depth as u64)).unwrap();
        let b = batch(3, Shape::batched(spec.t_steps, 4, 2, 64, 64), 2);
        let mut g = Graph::new();
        let (out, loss) = {
            let mut cx = spikelab::nn::Ctx::new(&mut g, &mut store, Mode::train().frozen_stats()).unwrap();
            let x = cx.g.input(b.input.clone());
            let out = net.forward(&mut cx, x).unwrap();
            let loss = cx.g.cross_entropy(out.logits, &b.labels).unwrap();
            (out, loss)
        };
        let grads = g.backward_scalar(loss).unwrap();
        let first = norm(grads.node(out.stages[0]).unwrap());
        let last = norm(grads.node(*out.stages.last().unwrap()).unwrap());
        let ratio = first / last;
        assert!((0.1..=10.0).contains(&ratio), "MDSNet{depth}: ratio {ratio}");
    }
}
