//! Loss, gradients, optimizer and the toy training driver.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::direct_encode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{lfsi_layer, LfsiConfig};
use crate::network::{build_network, Network, NetworkSpec};
use crate::nn::{Ctx, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{RealTensor, Shape};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// Momentum SGD with weight decay: `v = mu*v + g + wd*w`, `w -= lr*v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1) and weight decay >= 0, got {momentum} and {weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(&id).map(|v| v.as_slice())
    }
}

/// Applies one optimizer step to every trainable parameter with a gradient.
pub fn sgd_step(store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f64>>, opt: &mut OptimState) -> Result<()> {
    for (&id, g) in grads {
        if id.0 >= store.len() {
            return Err(Error::Argument(format!("gradient for unknown parameter {}", id.0)));
        }
        let p = store.get_mut(id);
        if p.kind != ParamKind::Trainable {
            continue;
        }
        if g.len() != p.data.len() {
            return Err(Error::dim(format!(
                "gradient for {} has {} entries, parameter has {}",
                p.name,
                g.len(),
                p.data.len()
            )));
        }
        let v = opt.velocity.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        for ((w, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = opt.momentum * *vi + gi + opt.weight_decay * *w;
            *w -= opt.lr * *vi;
        }
    }
    Ok(())
}

/// Time-encoded inputs `(T, N, C, H, W)` with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: RealTensor,
    pub labels: Vec<usize>,
}

pub struct StepOutput {
    pub loss: f64,
    pub grads: BTreeMap<ParamId, Vec<f64>>,
    pub correct: usize,
    pub logits: Var,
    pub graph: Graph,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn count_correct(logits: &RealTensor, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &l)| argmax(&logits.data()[n * k..(n + 1) * k]) == l)
        .count()
}

/// Forward pass through `model` (returning logits), cross-entropy loss, and
/// backward pass.
pub fn forward_backward_with(
    store: &mut ParamStore,
    mode: Mode,
    batch: &Batch,
    model: impl FnOnce(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let (logits, loss) = {
        let mut cx = Ctx::new(&mut g, store, mode)?;
        let x = cx.g.input(batch.input.clone());
        let logits = model(&mut cx, x)?;
        let loss = cx.g.cross_entropy(logits, &batch.labels)?;
        (logits, loss)
    };
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        let layer = g
            .first_non_finite()
            .map(|(_, s)| if s.is_empty() { "input".to_string() } else { s.to_string() })
            .unwrap_or_else(|| "loss".into());
        return Err(Error::Numeric {
            layer,
            msg: format!("loss is {value}"),
        });
    }
    let grads = g.backward_scalar(loss)?.into_params();
    let correct = count_correct(g.value(logits), &batch.labels);
    Ok(StepOutput {
        loss: value,
        grads,
        correct,
        logits,
        graph: g,
    })
}

pub fn forward_backward(net: &Network, store: &mut ParamStore, batch: &Batch, mode: Mode) -> Result<StepOutput> {
    forward_backward_with(store, mode, batch, |cx, x| Ok(net.forward(cx, x)?.logits))
}

/// Synthetic classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Horizontal versus vertical noisy gratings.
    TwoClass,
    /// One, two or three Gaussian blobs of mixed sizes.
    BlobCount,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::TwoClass => 2,
            Task::BlobCount => 3,
        }
    }

    pub fn sample(self, label: usize, size: usize, rng: &mut impl Rng) -> RealTensor {
        let noise = Normal::new(0.0, 0.3).expect("valid sigma");
        let mut img = vec![0.0; size * size];
        match self {
            Task::TwoClass => {
                let period = rng.gen_range(4.0..8.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = rng.gen_range(0.8..1.2);
                for i in 0..size {
                    for j in 0..size {
                        let coord = if label == 0 { i } else { j } as f64;
                        img[i * size + j] = amp * (2.0 * PI * coord / period + phase).sin();
                    }
                }
            }
            Task::BlobCount => {
                for _ in 0..=label {
                    let sigma = [1.5, 2.5, 4.0][rng.gen_range(0..3)];
                    let cy = rng.gen_range(0.0..size as f64);
                    let cx = rng.gen_range(0.0..size as f64);
                    for i in 0..size {
                        for j in 0..size {
                            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                            img[i * size + j] += 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v += noise.sample(rng));
        RealTensor::from_vec(Shape::new(1, 1, size, size), img).expect("finite synthetic image")
    }

    /// Balanced dataset of `n` samples.
    pub fn generate(self, n: usize, size: usize, rng: &mut impl Rng) -> Dataset {
        let k = self.num_classes();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let images = labels.iter().map(|&l| self.sample(l, size, rng)).collect();
        Dataset { images, labels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Single-step images `(1, 1, C, H, W)`.
    pub images: Vec<RealTensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Direct-encoded batch of the samples at `idx`.
    pub fn batch(&self, idx: &[usize], t_steps: usize) -> Result<Batch> {
        let frames = idx
            .iter()
            .map(|&i| direct_encode(&self.images[i], t_steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            input: RealTensor::stack_batch(&frames)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub lfsi_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            train_size: 256,
            test_size: 128,
            image_size: 32,
            lfsi_window: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_size == 0 || self.test_size == 0 || self.image_size == 0 {
            return Err(Error::Config("batch, dataset and image sizes must be positive".into()));
        }
        LfsiConfig::new(self.lfsi_window)?;
        OptimState::new(self.lr, self.momentum, self.weight_decay).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub firing_rate: f64,
    pub lfsi: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::io("history", e))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub acc: f64,
    pub firing_rate: f64,
    pub lfsi: f64,
}

/// Loss, accuracy and firing statistics over a dataset in eval mode.
pub fn evaluate(net: &Network, store: &mut ParamStore, ds: &Dataset, batch_size: usize, lfsi: &LfsiConfig) -> Result<Evaluation> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut spikes = 0i64;
    let mut capacity = 0i64;
    let mut layer_density: Vec<(f64, f64)> = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = ds.batch(chunk, net.spec.t_steps)?;
        let mut g = Graph::new();
        let out = {
            let mut cx = Ctx::new(&mut g, store, Mode::eval())?;
            let x = cx.g.input(batch.input.clone());
            let out = net.forward(&mut cx, x)?;
            cx.g.cross_entropy(out.logits, &batch.labels)
                .map(|l| (out.logits, l))?
        };
        loss += g.value(out.1).data()[0] * chunk.len() as f64;
        correct += count_correct(g.value(out.0), &batch.labels);
        let recs = g.spike_records();
        if layer_density.is_empty() {
            layer_density = vec![(0.0, 0.0); recs.len()];
        }
        for (acc, r) in layer_density.iter_mut().zip(recs) {
            let t = g.spike_tensor(r)?;
            let s = t.shape();
            let positions = (s.n * s.c * s.h * s.w) as f64;
            acc.0 += lfsi_layer(&t, lfsi)? * positions;
            acc.1 += positions;
            spikes += t.sum();
            capacity += s.numel() as i64 * t.d_max() as i64;
        }
    }
    let n = ds.len().max(1) as f64;
    let lfsi = if layer_density.is_empty() {
        0.0
    } else {
        layer_density.iter().map(|(d, p)| d / p).sum::<f64>() / layer_density.len() as f64
    };
    Ok(Evaluation {
        loss: loss / n,
        acc: correct as f64 / n,
        firing_rate: if capacity > 0 { spikes as f64 / capacity as f64 } else { 0.0 },
        lfsi,
    })
}

pub struct TrainedModel {
    pub net: Network,
    pub store: ParamStore,
    pub history: History,
}

/// Seeds for initialization, data and shuffling, all derived from `seed`.
fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains `spec` on a synthetic task. Row 0 of the history is the untrained
/// network (loss on the training set without updates); row `e` holds the
/// mean training loss of epoch `e` and test-set statistics after it.
pub fn train_toy(spec: &NetworkSpec, task: Task, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if spec.num_classes != task.num_classes() {
        return Err(Error::Config(format!(
            "task has {} classes, network has {}",
            task.num_classes(),
            spec.num_classes
        )));
    }
    let (net, mut store) = build_network(spec, &mut sub_rng(cfg.seed, 0))?;
    let mut data_rng = sub_rng(cfg.seed, 1);
    let train = task.generate(cfg.train_size, cfg.image_size, &mut data_rng);
    let test = task.generate(cfg.test_size, cfg.image_size, &mut data_rng);
    let mut shuffle = sub_rng(cfg.seed, 2);
    let lfsi = LfsiConfig::new(cfg.lfsi_window)?;
    let mut opt = OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;

    let mut history = History::default();
    let init_loss = evaluate(&net, &mut store, &train, cfg.batch_size, &lfsi)?.loss;
    let e0 = evaluate(&net, &mut store, &test, cfg.batch_size, &lfsi)?;
    history.rows.push(EpochRecord {
        epoch: 0,
        loss: init_loss,
        acc: e0.acc,
        firing_rate: e0.firing_rate,
        lfsi: e0.lfsi,
    });

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk, spec.t_steps)?;
            let step = forward_backward(&net, &mut store, &batch, Mode::train()).map_err(|e| match e {
                Error::Numeric { layer, msg } => Error::Training(format!("epoch {epoch}: {msg} at {layer}")),
                other => other,
            })?;
            if step.loss > DIVERGENCE_LOSS {
                return Err(Error::Training(format!("epoch {epoch}: loss {} diverged", step.loss)));
            }
            total += step.loss * chunk.len() as f64;
            sgd_step(&mut store, &step.grads, &mut opt)?;
        }
        let ev = evaluate(&net, &mut store, &test, cfg.batch_size, &lfsi)?;
        history.rows.push(EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            acc: ev.acc,
            firing_rate: ev.firing_rate,
            lfsi: ev.lfsi,
        });
    }
    Ok(TrainedModel { net, store, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut store = ParamStore::new();
        let id = store.add("w", vec![1], vec![1.0], ParamKind::Trainable);
        let grads: BTreeMap<_, _> = [(id, vec![1.0])].into();
        let mut opt = OptimState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut store, &grads, &mut opt).unwrap();
        assert!((store.scalar(id) - 0.9).abs() < 1e-15);

        let zero: BTreeMap<_, _> = [(id, vec![0.0])].into();
        let mut opt = OptimState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut store, &zero, &mut opt).unwrap();
        assert!((store.scalar(id) - 0.9).abs() < 1e-15);

        let mut store = ParamStore::new();
        let id = store.add("w", vec![1], vec![0.0], ParamKind::Trainable);
        let mut opt = OptimState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut store, &grads, &mut opt).unwrap();
        let before = store.scalar(id);
        sgd_step(&mut store, &grads, &mut opt).unwrap();
        assert!((opt.velocity(id).unwrap()[0] - 1.9).abs() < 1e-15);
        assert!((before - store.scalar(id) - 0.19).abs() < 1e-15);

        assert!(OptimState::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store.add("running_mean", vec![1], vec![1.0], ParamKind::Buffer);
        let grads: BTreeMap<_, _> = [(id, vec![1.0])].into();
        sgd_step(&mut store, &grads, &mut OptimState::new(0.1, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(store.scalar(id), 1.0);
    }

    #[test]
    fn datasets_are_balanced_and_seeded() {
        let a = Task::TwoClass.generate(10, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let b = Task::TwoClass.generate(10, 8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 5);
        let c = Task::BlobCount.generate(9, 8, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(c.labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        let batch = a.batch(&[0, 3], 2).unwrap();
        assert_eq!(batch.input.shape(), Shape::batched(2, 2, 1, 8, 8));
        assert_eq!(batch.labels, vec![0, 1]);
    }
}
