//! Reverse-mode gradient tape.
//!
//! Every forward operation appends a node holding its output value and the
//! activations its backward rule needs. `backward` walks the nodes in exact
//! reverse order of creation. Spiking nodes substitute the neuron's
//! surrogate for the derivative of the firing function and propagate
//! through the membrane recurrence across time steps.
//!
//! The tape also records every spiking layer and convolution it sees, which
//! is what the metrics module uses for firing rates, LFSI, variance probes
//! and SOP counting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{self, ConvGeom};
use crate::neuron::{run_layer, Neuron, SpikeMode};
use crate::params::ParamId;
use crate::tensor::{RealTensor, Shape, SpikeTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A spiking layer seen during the forward pass.
#[derive(Clone, Debug)]
pub struct SpikeRecord {
    pub name: String,
    pub input: Var,
    pub output: Var,
    pub d_max: i32,
}

/// A convolution seen during the forward pass.
#[derive(Clone, Debug)]
pub struct ConvRecord {
    pub name: String,
    pub geom: ConvGeom,
    pub input: Var,
    pub output: Var,
    /// Whether the convolution input is a spike tensor (possibly pooled or
    /// strided), i.e. whether it runs as accumulate-only synaptic ops.
    pub spike_input: bool,
    pub d_max: i32,
}

enum Op {
    Input,
    Spike {
        x: Var,
        neuron: Neuron,
        membrane: Vec<f64>,
    },
    Conv {
        x: Var,
        geom: ConvGeom,
        weight: Vec<f64>,
        weight_param: Option<ParamId>,
        bias_param: Option<ParamId>,
    },
    Bn {
        x: Var,
        gain: Vec<f64>,
        alpha_vth: f64,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        lambda: Option<ParamId>,
        beta: Option<ParamId>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Stride {
        x: Var,
        stride: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
        param: Option<ParamId>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    MeanThw {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: RealTensor,
    op: Op,
    scope: String,
    /// Spike-valued (integer counts in `[0, d_max]`), with the bound.
    spike_bound: Option<i32>,
}

/// Statistics source for a tdBN node.
pub enum BnStats<'a> {
    /// Normalize with the batch's own statistics.
    Batch,
    /// Normalize with fixed statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Parameters of a tdBN node.
pub struct BnArgs<'a> {
    pub lambda: &'a [f64],
    pub beta: &'a [f64],
    pub alpha: f64,
    pub v_th: f64,
    pub eps: f64,
    pub lambda_param: Option<ParamId>,
    pub beta_param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: Vec<String>,
    spikes: Vec<SpikeRecord>,
    convs: Vec<ConvRecord>,
}

/// Output of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: Vec<Option<RealTensor>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn node(&self, v: Var) -> Option<&RealTensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Vec<f64>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<f64>> {
        self.params
    }
}

fn accumulate(slot: &mut Option<RealTensor>, g: RealTensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn accumulate_param(map: &mut BTreeMap<ParamId, Vec<f64>>, id: ParamId, g: Vec<f64>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            map.insert(id, g);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scope_of(&self, v: Var) -> &str {
        &self.nodes[v.0].scope
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn current_scope(&self) -> String {
        self.scope.join(".")
    }

    pub fn spike_records(&self) -> &[SpikeRecord] {
        &self.spikes
    }

    pub fn conv_records(&self) -> &[ConvRecord] {
        &self.convs
    }

    /// Output of a recorded spiking layer as an integer spike tensor.
    pub fn spike_tensor(&self, rec: &SpikeRecord) -> Result<SpikeTensor> {
        SpikeTensor::from_real_counts(self.value(rec.output), rec.d_max)
    }

    fn push(&mut self, value: RealTensor, op: Op, spike_bound: Option<i32>) -> Var {
        let scope = self.current_scope();
        self.nodes.push(Node {
            value,
            op,
            scope,
            spike_bound,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: RealTensor) -> Var {
        self.push(value, Op::Input, None)
    }

    /// Spiking layer over all time steps of `x`, starting from rest.
    pub fn spike(&mut self, x: Var, neuron: Neuron, mode: SpikeMode) -> Var {
        let (out, membrane) = run_layer(self.value(x), &neuron, mode);
        let bound = (mode == SpikeMode::Integer).then_some(neuron.d_max());
        let v = self.push(out, Op::Spike { x, neuron, membrane }, bound);
        self.spikes.push(SpikeRecord {
            name: self.current_scope(),
            input: x,
            output: v,
            d_max: neuron.d_max(),
        });
        v
    }

    pub fn conv(
        &mut self,
        x: Var,
        geom: ConvGeom,
        weight: &[f64],
        bias: Option<&[f64]>,
        weight_param: Option<ParamId>,
        bias_param: Option<ParamId>,
    ) -> Result<Var> {
        if weight.len() != geom.weight_len() {
            return Err(Error::dim(format!(
                "conv weight length {} != {}",
                weight.len(),
                geom.weight_len()
            )));
        }
        let out = layers::conv_forward_raw(self.value(x), &geom, weight, bias)?;
        let spike_bound = self.nodes[x.0].spike_bound;
        let v = self.push(
            out,
            Op::Conv {
                x,
                geom,
                weight: weight.to_vec(),
                weight_param,
                bias_param,
            },
            None,
        );
        self.convs.push(ConvRecord {
            name: self.current_scope(),
            geom,
            input: x,
            output: v,
            spike_input: spike_bound.is_some(),
            d_max: spike_bound.unwrap_or(1),
        });
        Ok(v)
    }

    /// tdBN node. With batch statistics, returns them so the caller can
    /// update running estimates.
    pub fn bn(&mut self, x: Var, args: BnArgs<'_>, stats: BnStats<'_>) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x);
        if args.lambda.len() != s.c || args.beta.len() != s.c {
            return Err(Error::dim(format!(
                "tdBN has {} channels, input has {}",
                args.lambda.len(),
                s.c
            )));
        }
        let alpha_vth = args.alpha * args.v_th;
        let gain: Vec<f64> = args.lambda.iter().map(|l| l * alpha_vth).collect();
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let (m, v) = layers::channel_stats(self.value(x))?;
                (m, v, true)
            }
            BnStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + args.eps).sqrt()).collect();
        let (y, xhat) = layers::bn_apply(self.value(x), &mean, &inv_std, &gain, args.beta);
        let v = self.push(
            y,
            Op::Bn {
                x,
                gain,
                alpha_vth,
                xhat,
                inv_std,
                batch_stats,
                lambda: args.lambda_param,
                beta: args.beta_param,
            },
            None,
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = layers::maxpool2_with_indices(self.value(x))?;
        let bound = self.nodes[x.0].spike_bound;
        Ok(self.push(out, Op::MaxPool { x, argmax }, bound))
    }

    pub fn stride_downsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let out = layers::stride_downsample(self.value(x), stride)?;
        let bound = self.nodes[x.0].spike_bound;
        Ok(self.push(out, Op::Stride { x, stride }, bound))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = layers::nni_upsample(self.value(x), factor)?;
        let bound = self.nodes[x.0].spike_bound;
        Ok(self.push(out, Op::Upsample { x, factor }, bound))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "cannot add {} and {}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(p, q)| p + q).collect();
        let out = RealTensor::from_raw(va.shape(), data);
        Ok(self.push(out, Op::Add { a, b }, None))
    }

    /// Multiplies by a scalar; when `param` is set the scalar is learnable.
    pub fn scale(&mut self, x: Var, factor: f64, param: Option<ParamId>) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor, param }, None)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.t != sb.t || sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::dim(format!("cannot concatenate {sa} and {sb}")));
        }
        let os = sa.with_c(sa.c + sb.c);
        let mut data = Vec::with_capacity(os.numel());
        for f in 0..sa.frames() {
            data.extend_from_slice(&va.data()[f * sa.frame_len()..(f + 1) * sa.frame_len()]);
            data.extend_from_slice(&vb.data()[f * sb.frame_len()..(f + 1) * sb.frame_len()]);
        }
        let bound = match (self.nodes[a.0].spike_bound, self.nodes[b.0].spike_bound) {
            (Some(p), Some(q)) => Some(p.max(q)),
            _ => None,
        };
        Ok(self.push(RealTensor::from_raw(os, data), Op::Concat { a, b }, bound))
    }

    /// Mean over time and space: `(T, N, C, H, W) -> (1, N, C, 1, 1)`.
    pub fn mean_thw(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = Shape::batched(1, s.n, s.c, 1, 1);
        let mut out = vec![0.0; os.numel()];
        let plane = s.plane();
        for t in 0..s.t {
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = ((t * s.n + n) * s.c + c) * plane;
                    out[n * s.c + c] += self.value(x).data()[base..base + plane].iter().sum::<f64>();
                }
            }
        }
        let inv = 1.0 / (s.t * plane) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(RealTensor::from_raw(os, out), Op::MeanThw { x }, None)
    }

    /// Mean softmax cross-entropy over the batch. `logits` is `(1, N, K, 1, 1)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.t != 1 || s.h != 1 || s.w != 1 || s.n != labels.len() {
            return Err(Error::dim(format!(
                "cross-entropy expects (1, {}, K, 1, 1) logits, got {s}",
                labels.len()
            )));
        }
        let k = s.c;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Argument(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            let row = &z[n * k..(n + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[n * k + j] = (row[j] - m).exp() / denom;
            }
            loss -= (row[label] - m) - denom.ln();
        }
        loss /= labels.len().max(1) as f64;
        let out = RealTensor::from_raw(Shape::new(1, 1, 1, 1), vec![loss]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            None,
        ))
    }

    /// First node with a non-finite value, with its scope.
    pub fn first_non_finite(&self) -> Option<(Var, &str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].scope.as_str()))
    }

    /// Backward pass from a scalar node with unit seed.
    pub fn backward_scalar(&self, out: Var) -> Result<Gradients> {
        let s = self.shape(out);
        if s.numel() != 1 {
            return Err(Error::dim(format!("backward_scalar needs a scalar, got {s}")));
        }
        self.backward(out, RealTensor::full(s, 1.0))
    }

    /// Propagates `seed` (the gradient of some objective with respect to
    /// `out`) back to every node and parameter that `out` depends on.
    pub fn backward(&self, out: Var, seed: RealTensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim(format!(
                "seed shape {} does not match output {}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<RealTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = BTreeMap::new();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Spike { x, neuron, membrane } => {
                    let gx = spike_backward(&g, neuron, membrane);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Conv {
                    x,
                    geom,
                    weight,
                    weight_param,
                    bias_param,
                } => {
                    let (gx, gw, gb) = layers::conv_backward_raw(self.value(*x), geom, weight, &g);
                    if let Some(id) = weight_param {
                        accumulate_param(&mut params, *id, gw);
                    }
                    if let Some(id) = bias_param {
                        accumulate_param(&mut params, *id, gb);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Bn {
                    x,
                    gain,
                    alpha_vth,
                    xhat,
                    inv_std,
                    batch_stats,
                    lambda,
                    beta,
                } => {
                    let s = g.shape();
                    let plane = s.plane();
                    let count = (s.frames() * plane) as f64;
                    let mut dbeta = vec![0.0; s.c];
                    let mut dgain_raw = vec![0.0; s.c];
                    let mut sum_dxhat = vec![0.0; s.c];
                    let mut sum_dxhat_xhat = vec![0.0; s.c];
                    for f in 0..s.frames() {
                        for c in 0..s.c {
                            let base = (f * s.c + c) * plane;
                            for j in base..base + plane {
                                let dy = g.data()[j];
                                dbeta[c] += dy;
                                dgain_raw[c] += dy * xhat[j];
                                let dxh = dy * gain[c];
                                sum_dxhat[c] += dxh;
                                sum_dxhat_xhat[c] += dxh * xhat[j];
                            }
                        }
                    }
                    let mut gx = vec![0.0; s.numel()];
                    for f in 0..s.frames() {
                        for c in 0..s.c {
                            let base = (f * s.c + c) * plane;
                            for j in base..base + plane {
                                let dxh = g.data()[j] * gain[c];
                                gx[j] = if *batch_stats {
                                    inv_std[c] / count * (count * dxh - sum_dxhat[c] - xhat[j] * sum_dxhat_xhat[c])
                                } else {
                                    dxh * inv_std[c]
                                };
                            }
                        }
                    }
                    if let Some(id) = lambda {
                        accumulate_param(&mut params, *id, dgain_raw.iter().map(|v| v * alpha_vth).collect());
                    }
                    if let Some(id) = beta {
                        accumulate_param(&mut params, *id, dbeta);
                    }
                    accumulate(&mut grads[x.0], RealTensor::from_raw(s, gx));
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; self.shape(*x).numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g.data()[o];
                    }
                    accumulate(&mut grads[x.0], RealTensor::from_raw(self.shape(*x), gx));
                }
                Op::Stride { x, stride } => {
                    let gx = layers::stride_downsample_backward(&g, self.shape(*x), *stride);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Upsample { x, factor } => {
                    let gx = layers::nni_upsample_backward(&g, self.shape(*x), *factor);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Scale { x, factor, param } => {
                    if let Some(id) = param {
                        let dot: f64 = g.data().iter().zip(self.value(*x).data()).map(|(p, q)| p * q).sum();
                        accumulate_param(&mut params, *id, vec![dot]);
                    }
                    accumulate(&mut grads[x.0], g.map(|v| v * factor));
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let mut ga = Vec::with_capacity(sa.numel());
                    let mut gb = Vec::with_capacity(sb.numel());
                    let fl = sa.frame_len() + sb.frame_len();
                    for f in 0..sa.frames() {
                        let row = &g.data()[f * fl..(f + 1) * fl];
                        ga.extend_from_slice(&row[..sa.frame_len()]);
                        gb.extend_from_slice(&row[sa.frame_len()..]);
                    }
                    accumulate(&mut grads[a.0], RealTensor::from_raw(sa, ga));
                    accumulate(&mut grads[b.0], RealTensor::from_raw(sb, gb));
                }
                Op::MeanThw { x } => {
                    let s = self.shape(*x);
                    let plane = s.plane();
                    let inv = 1.0 / (s.t * plane) as f64;
                    let mut gx = vec![0.0; s.numel()];
                    for t in 0..s.t {
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let gv = g.data()[n * s.c + c] * inv;
                                let base = ((t * s.n + n) * s.c + c) * plane;
                                gx[base..base + plane].iter_mut().for_each(|v| *v = gv);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], RealTensor::from_raw(s, gx));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let s = self.shape(*logits);
                    let k = s.c;
                    let scale = g.data()[0] / labels.len().max(1) as f64;
                    let mut gz = probs.clone();
                    for (n, &l) in labels.iter().enumerate() {
                        gz[n * k + l] -= 1.0;
                    }
                    gz.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads[logits.0], RealTensor::from_raw(s, gz));
                }
            }
            grads[i] = Some(g);
        }

        if let Some((id, _)) = params.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric {
                layer: format!("param {}", id.0),
                msg: "non-finite gradient".into(),
            });
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Backpropagation through time for one spiking layer:
///
/// ```text
/// du_t     = do_t * s(u_t) + dh_t * (1 - v_th * s(u_t))
/// dx_t     = du_t
/// dh_{t-1} = tau * du_t
/// ```
fn spike_backward(g: &RealTensor, neuron: &Neuron, membrane: &[f64]) -> RealTensor {
    let s = g.shape();
    let slice = s.slice_len();
    let tau = neuron.tau();
    let v_th = neuron.v_th();
    let mut gx = vec![0.0; s.numel()];
    let mut dh = vec![0.0; slice];
    for t in (0..s.t).rev() {
        let base = t * slice;
        for i in 0..slice {
            let sg = neuron.surrogate(membrane[base + i]);
            let du = g.data()[base + i] * sg + dh[i] * (1.0 - v_th * sg);
            gx[base + i] = du;
            dh[i] = tau * du;
        }
    }
    RealTensor::from_raw(s, gx)
}
