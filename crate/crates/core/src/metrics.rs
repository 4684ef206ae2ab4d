//! Firing statistics, operation counts and energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::ConvGeom;
use crate::network::NetworkSpec;
use crate::tensor::{Shape, SpikeTensor};

/// Energy per accumulate, in picojoules.
pub const E_AC_PJ: f64 = 0.9;
/// Energy per multiply-accumulate, in picojoules.
pub const E_MAC_PJ: f64 = 4.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfsiConfig {
    /// Side of the square neighbourhood; odd.
    pub s: usize,
}

impl Default for LfsiConfig {
    fn default() -> Self {
        Self { s: 3 }
    }
}

impl LfsiConfig {
    pub fn new(s: usize) -> Result<Self> {
        let c = Self { s };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.s.is_multiple_of(2) {
            return Err(Error::Config(format!("LFSI window must be odd and positive, got {}", self.s)));
        }
        Ok(())
    }
}

/// Per-neuron saturation over time: 1 where the time-summed spike count
/// equals `T * d_max`. Laid out `(N, C, H, W)`.
pub fn saturation_mask(o: &SpikeTensor) -> Vec<u8> {
    let s = o.shape();
    let slice = s.slice_len();
    let full = s.t as i64 * o.d_max() as i64;
    let mut sums = vec![0i64; slice];
    for t in 0..s.t {
        for (acc, &v) in sums.iter_mut().zip(&o.data()[t * slice..(t + 1) * slice]) {
            *acc += v as i64;
        }
    }
    sums.iter().map(|&v| u8::from(v == full)).collect()
}

/// Mean local saturation density of one layer. Windows are clipped at the
/// borders and normalized by their in-bounds cell count.
pub fn lfsi_layer(o: &SpikeTensor, cfg: &LfsiConfig) -> Result<f64> {
    cfg.validate()?;
    let s = o.shape();
    let mask = saturation_mask(o);
    Ok(lfsi_from_mask(&mask, s, cfg.s))
}

fn lfsi_from_mask(mask: &[u8], s: Shape, side: usize) -> f64 {
    let (h, w) = (s.h, s.w);
    let planes = s.n * s.c;
    if planes * h * w == 0 {
        return 0.0;
    }
    let r = side / 2;
    let pw = w + 1;
    let mut prefix = vec![0u32; (h + 1) * pw];
    let mut total = 0.0;
    for p in 0..planes {
        let plane = &mask[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let mut row = 0u32;
            for j in 0..w {
                row += plane[i * w + j] as u32;
                prefix[(i + 1) * pw + j + 1] = prefix[i * pw + j + 1] + row;
            }
        }
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
                let count = prefix[i1 * pw + j1] + prefix[i0 * pw + j0] - prefix[i0 * pw + j1] - prefix[i1 * pw + j0];
                let cells = (i1 - i0) * (j1 - j0);
                total += count as f64 / cells as f64;
            }
        }
    }
    total / (planes * h * w) as f64
}

/// Unweighted mean of per-layer LFSI.
pub fn lfsi_network(layers: &[SpikeTensor], cfg: &LfsiConfig) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::Argument("LFSI needs at least one layer".into()));
    }
    let mut sum = 0.0;
    for l in layers {
        sum += lfsi_layer(l, cfg)?;
    }
    Ok(sum / layers.len() as f64)
}

/// Emitted spikes over the maximum possible, on the binary-unrolled train.
pub fn firing_rate(layers: &[SpikeTensor]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::Argument("firing rate needs at least one layer".into()));
    }
    let mut spikes = 0i64;
    let mut capacity = 0i64;
    for l in layers {
        spikes += l.sum();
        capacity += l.shape().numel() as i64 * l.d_max() as i64;
    }
    if capacity == 0 {
        return Ok(0.0);
    }
    Ok(spikes as f64 / capacity as f64)
}

/// `2 * C_in/groups * C_out * K^2 * H_out * W_out`.
pub fn conv_flops(geom: &ConvGeom, out_h: usize, out_w: usize) -> f64 {
    2.0 * (geom.in_per_group() * geom.out_ch * geom.kernel * geom.kernel * out_h * out_w) as f64
}

/// `rate * T*D * C_in/groups * C_out * K^2 * H_out * W_out`.
pub fn conv_sops(rate: f64, t_d: usize, geom: &ConvGeom, out_h: usize, out_w: usize) -> f64 {
    rate * t_d as f64 * (geom.in_per_group() * geom.out_ch * geom.kernel * geom.kernel * out_h * out_w) as f64
}

/// A spike-driven convolution and the firing rate of its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvRate {
    pub name: String,
    pub geom: ConvGeom,
    pub out_h: usize,
    pub out_w: usize,
    /// Unrolled steps `T * d_max`.
    pub t_d: usize,
    pub rate: Option<f64>,
}

/// Rates of every spike-driven convolution recorded in `g`.
pub fn record_rates(g: &Graph) -> Result<Vec<ConvRate>> {
    g.conv_records()
        .iter()
        .filter(|r| r.spike_input)
        .map(|r| {
            let input = SpikeTensor::from_real_counts(g.value(r.input), r.d_max)?;
            let out = g.shape(r.output);
            Ok(ConvRate {
                name: r.name.clone(),
                geom: r.geom,
                out_h: out.h,
                out_w: out.w,
                t_d: input.shape().t * r.d_max as usize,
                rate: Some(firing_rate(std::slice::from_ref(&input))?),
            })
        })
        .collect()
}

/// Total synaptic operations per sample.
pub fn count_sops(convs: &[ConvRate]) -> Result<f64> {
    convs.iter().try_fold(0.0, |acc, c| {
        let rate = c
            .rate
            .ok_or_else(|| Error::State(format!("no firing rate recorded for {}", c.name)))?;
        Ok(acc + conv_sops(rate, c.t_d, &c.geom, c.out_h, c.out_w))
    })
}

/// FLOPs of the real-valued encoding convolution for one input frame.
pub fn count_flops(spec: &NetworkSpec, input: Shape) -> Result<f64> {
    let e = &spec.encoding;
    let geom = ConvGeom::same(spec.in_channels, e.channels, e.kernel, e.stride);
    let out = geom.out_shape(input)?;
    Ok(conv_flops(&geom, out.h, out.w))
}

/// FLOPs of every real-valued convolution recorded in `g`, per sample frame.
pub fn recorded_flops(g: &Graph) -> f64 {
    g.conv_records()
        .iter()
        .filter(|r| !r.spike_input)
        .map(|r| {
            let out = g.shape(r.output);
            conv_flops(&r.geom, out.h, out.w)
        })
        .sum()
}

/// Energy in millijoules: accumulates for SOPs, multiply-accumulates for
/// the real-valued layers (`MACs = FLOPs / 2`).
pub fn energy_mj(sops: f64, flops: f64) -> f64 {
    (E_AC_PJ * sops + E_MAC_PJ * (flops / 2.0)) / 1e9
}

/// Sample variance of each spiking layer's input, in layer order.
pub fn variance_probe(g: &Graph) -> Vec<(String, f64)> {
    g.spike_records()
        .iter()
        .map(|r| (r.name.clone(), g.value(r.input).sample_variance()))
        .collect()
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson needs two equal series of length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub name: String,
    pub lfsi: f64,
    pub firing_rate: f64,
    pub input_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub name: String,
    pub layers: usize,
    pub lfsi: f64,
    pub firing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub firing_rate: f64,
    pub lfsi: f64,
    pub lfsi_window: usize,
    pub sops: f64,
    pub flops: f64,
    pub energy_mj: f64,
    pub layers: Vec<LayerMetrics>,
    pub stages: Vec<StageMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricsReport {
    /// Builds a report from a forward pass. Stages group layers whose name
    /// starts with `stage<k>`.
    pub fn from_graph(g: &Graph, cfg: &LfsiConfig, flops: f64) -> Result<Self> {
        let recs = g.spike_records();
        if recs.is_empty() {
            return Err(Error::State("forward pass recorded no spiking layers".into()));
        }
        let mut layers = Vec::with_capacity(recs.len());
        let mut tensors = Vec::with_capacity(recs.len());
        for r in recs {
            let t = g.spike_tensor(r)?;
            layers.push(LayerMetrics {
                name: r.name.clone(),
                lfsi: lfsi_layer(&t, cfg)?,
                firing_rate: firing_rate(std::slice::from_ref(&t))?,
                input_variance: g.value(r.input).sample_variance(),
            });
            tensors.push(t);
        }
        let lfsi = layers.iter().map(|l| l.lfsi).sum::<f64>() / layers.len() as f64;
        let fr = firing_rate(&tensors)?;

        let mut stages: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            let head = l.name.split('.').next().unwrap_or("");
            if !head.starts_with("stage") {
                continue;
            }
            match stages.iter_mut().find(|(n, _)| n == head) {
                Some((_, idx)) => idx.push(i),
                None => stages.push((head.to_string(), vec![i])),
            }
        }
        let stages = stages
            .into_iter()
            .map(|(name, idx)| {
                let ts: Vec<SpikeTensor> = idx.iter().map(|&i| tensors[i].clone()).collect();
                Ok(StageMetrics {
                    name,
                    layers: idx.len(),
                    lfsi: idx.iter().map(|&i| layers[i].lfsi).sum::<f64>() / idx.len() as f64,
                    firing_rate: firing_rate(&ts)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let sops = count_sops(&record_rates(g)?)?;
        Ok(Self {
            firing_rate: fr,
            lfsi,
            lfsi_window: cfg.s,
            sops,
            flops,
            energy_mj: energy_mj(sops, flops),
            layers,
            stages,
            config_hash: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// One row per layer, followed by a `total` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["layer", "lfsi", "firing_rate", "input_variance", "sops", "flops", "energy_mj"])
            .map_err(fmt)?;
        for l in &self.layers {
            w.write_record([
                l.name.clone(),
                l.lfsi.to_string(),
                l.firing_rate.to_string(),
                l.input_variance.to_string(),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(fmt)?;
        }
        w.write_record([
            "total".to_string(),
            self.lfsi.to_string(),
            self.firing_rate.to_string(),
            String::new(),
            self.sops.to_string(),
            self.flops.to_string(),
            self.energy_mj.to_string(),
        ])
        .map_err(fmt)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}
