//! Network description, presets and the assembled backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockKind, BlockSpec, ShortcutStyle, Smfm};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::ConvGeom;
use crate::neuron::Neuron;
use crate::nn::{Builder, Conv, Ctx, TdBn};
use crate::params::ParamStore;
use crate::tensor::Shape;

/// Base channel counts: encoding block, then the four stages.
pub const BASE_CHANNELS: [usize; 5] = [64, 64, 128, 256, 512];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Output stride relative to the input.
    pub stride: usize,
    pub channels: usize,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub directions: usize,
}

/// Slot between the last stage and the fusion module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SppfSlot {
    #[default]
    PassThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub t_steps: usize,
    pub encoding: EncodingSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub sppf: SppfSlot,
    #[serde(default)]
    pub fusion: Option<FusionSpec>,
    #[serde(default)]
    pub neuron: Neuron,
    #[serde(default)]
    pub shortcut: ShortcutStyle,
    pub num_classes: usize,
}

fn scaled(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

impl NetworkSpec {
    /// MDSNet preset of the given depth (10, 18, 34 or 104) with channels
    /// scaled by `width`.
    pub fn mdsnet(depth: usize, width: f64, in_channels: usize, num_classes: usize) -> Result<Self> {
        use BlockKind::{Mds1, Mds2};
        let layout: [&[(BlockKind, usize)]; 4] = match depth {
            10 => [&[(Mds2, 0)], &[(Mds2, 0)], &[(Mds2, 0)], &[(Mds2, 0)]],
            18 => [&[(Mds2, 1)], &[(Mds2, 1)], &[(Mds2, 1)], &[(Mds2, 1)]],
            34 => [
                &[(Mds2, 2)],
                &[(Mds2, 1), (Mds1, 1)],
                &[(Mds2, 2), (Mds1, 2)],
                &[(Mds2, 2)],
            ],
            104 => [
                &[(Mds2, 2)],
                &[(Mds2, 3), (Mds1, 3)],
                &[(Mds2, 15), (Mds1, 15)],
                &[(Mds2, 3), (Mds1, 3)],
            ],
            d => return Err(Error::Config(format!("no MDSNet preset of depth {d}"))),
        };
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Config(format!("width factor must be positive, got {width}")));
        }
        let ch: Vec<usize> = BASE_CHANNELS.iter().map(|&c| scaled(c, width)).collect();
        let stages = Self::stages_from_layout(ch[0], 2, &ch[1..], &layout);
        Ok(Self {
            name: format!("MDSNet{depth}"),
            in_channels,
            t_steps: 4,
            encoding: EncodingSpec {
                channels: ch[0],
                kernel: 3,
                stride: 2,
            },
            stages,
            sppf: SppfSlot::PassThrough,
            fusion: None,
            neuron: Neuron::default(),
            shortcut: ShortcutStyle::Mds,
            num_classes,
        })
    }

    /// Small backbone for desk-scale runs: a stride-2 encoding block, then
    /// one stage per entry of `widths`, each an MDS-Block2 followed by
    /// `mds1_per_stage` MDS-Block1s, all without inner MS blocks.
    pub fn toy(in_channels: usize, num_classes: usize, enc_channels: usize, widths: &[usize], mds1_per_stage: usize) -> Self {
        let mut blocks = vec![(BlockKind::Mds2, 0)];
        blocks.extend(std::iter::repeat_n((BlockKind::Mds1, 0), mds1_per_stage));
        let layout: Vec<&[(BlockKind, usize)]> = widths.iter().map(|_| blocks.as_slice()).collect();
        Self {
            name: "toy".into(),
            in_channels,
            t_steps: 2,
            encoding: EncodingSpec {
                channels: enc_channels,
                kernel: 3,
                stride: 2,
            },
            stages: Self::stages_from_layout(enc_channels, 2, widths, &layout),
            sppf: SppfSlot::PassThrough,
            fusion: None,
            neuron: Neuron::default(),
            shortcut: ShortcutStyle::Mds,
            num_classes,
        }
    }

    /// Builds stage specs where the first block of every stage downsamples.
    pub fn stages_from_layout(enc_ch: usize, enc_stride: usize, channels: &[usize], layout: &[&[(BlockKind, usize)]]) -> Vec<StageSpec> {
        let mut c_prev = enc_ch;
        let mut stride = enc_stride;
        layout
            .iter()
            .zip(channels)
            .map(|(blocks, &c)| {
                let specs = blocks
                    .iter()
                    .map(|&(kind, depth)| {
                        let spec = BlockSpec::new(kind, c_prev, c, depth);
                        if kind.downsamples() {
                            stride *= 2;
                        }
                        c_prev = c;
                        spec
                    })
                    .collect();
                StageSpec {
                    stride,
                    channels: c,
                    blocks: specs,
                }
            })
            .collect()
    }

    pub fn with_fusion(mut self, directions: usize) -> Self {
        self.fusion = Some(FusionSpec { directions });
        self
    }

    pub fn with_shortcut(mut self, style: ShortcutStyle) -> Self {
        self.shortcut = style;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.t_steps == 0 || self.num_classes == 0 {
            return cfg("in_channels, t_steps and num_classes must be positive".into());
        }
        self.neuron.validate()?;
        let e = &self.encoding;
        if e.channels == 0 || e.kernel == 0 || e.kernel.is_multiple_of(2) || e.stride == 0 {
            return cfg(format!("invalid encoding block {e:?}"));
        }
        if self.stages.is_empty() {
            return cfg("network needs at least one stage".into());
        }
        let mut c = e.channels;
        let mut stride = e.stride;
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks.is_empty() {
                return cfg(format!("stage {i} has no blocks"));
            }
            let prev = stride;
            for b in &st.blocks {
                b.validate()?;
                if b.channels_in != c {
                    return cfg(format!(
                        "stage {i}: {:?} block expects {} input channels, previous output has {c}",
                        b.kind, b.channels_in
                    ));
                }
                c = b.channels_out;
                if b.kind.downsamples() {
                    stride *= 2;
                }
            }
            if stride != 2 * prev {
                return cfg(format!("stage {i} must downsample exactly once (stride {prev} -> {stride})"));
            }
            if st.stride != stride {
                return cfg(format!("stage {i} declares stride {} but its blocks give {stride}", st.stride));
            }
            if st.channels != c {
                return cfg(format!("stage {i} declares {} channels but its blocks give {c}", st.channels));
            }
        }
        if let Some(f) = self.fusion {
            if self.stages.len() < 3 {
                return cfg("fusion needs at least three stages".into());
            }
            crate::blocks::smfm_topology(f.directions)?;
        }
        Ok(())
    }

    /// Channels of the three fused levels (the last three stages).
    pub fn fusion_channels(&self) -> Option<[usize; 3]> {
        let n = self.stages.len();
        (n >= 3).then(|| [self.stages[n - 3].channels, self.stages[n - 2].channels, self.stages[n - 1].channels])
    }

    /// Static shape propagation: encoding output, then each stage output.
    pub fn stage_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {}",
                self.in_channels, input.c
            )));
        }
        let enc = ConvGeom::same(self.in_channels, self.encoding.channels, self.encoding.kernel, self.encoding.stride);
        let mut s = enc.out_shape(input)?;
        let mut out = vec![s];
        for st in &self.stages {
            for b in &st.blocks {
                s = b.out_shape(s)?;
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// Spiking layer, 1x1 conv to class scores, mean over time and space.
#[derive(Clone, Debug)]
pub struct Head {
    pub neuron: Neuron,
    pub conv: Conv,
}

impl Head {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = cx.g.spike(x, self.neuron, cx.mode.spike);
        let z = self.conv.forward(cx, s)?;
        Ok(cx.g.mean_thw(z))
    }
}

/// Real-valued conv and tdBN on the encoded input.
#[derive(Clone, Debug)]
pub struct EncodingBlock {
    pub conv: Conv,
    pub bn: TdBn,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub encoding: EncodingBlock,
    pub stages: Vec<Vec<Block>>,
    pub smfm: Option<Smfm>,
    pub heads: Vec<Head>,
}

/// Named intermediate results of a forward pass.
#[derive(Clone, Debug)]
pub struct Output {
    pub logits: Var,
    pub encoded: Var,
    pub stages: Vec<Var>,
    pub levels: Option<[Var; 3]>,
}

/// Builds a network and its parameters from `spec`.
pub fn build_network<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<(Network, ParamStore)> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, rng);
    let neuron = spec.neuron;
    let e = &spec.encoding;
    let enc_geom = ConvGeom::same(spec.in_channels, e.channels, e.kernel, e.stride);
    let encoding = b.scoped("encoding", |b| -> Result<_> {
        Ok(EncodingBlock {
            conv: b.scoped("conv", |b| Conv::build(b, enc_geom, false))?,
            bn: b.scoped("bn", |b| TdBn::build(b, e.channels, 1.0, neuron.v_th())),
        })
    })?;
    let mut stages = Vec::with_capacity(spec.stages.len());
    for (i, st) in spec.stages.iter().enumerate() {
        let blocks = b.scoped(&format!("stage{}", i + 1), |b| {
            st.blocks
                .iter()
                .enumerate()
                .map(|(j, bs)| b.scoped(&format!("block{j}"), |b| Block::build(b, bs, neuron, spec.shortcut)))
                .collect::<Result<Vec<_>>>()
        })?;
        stages.push(blocks);
    }
    let smfm = match (spec.fusion, spec.fusion_channels()) {
        (Some(f), Some(ch)) => Some(b.scoped("smfm", |b| Smfm::build(b, neuron, ch, f.directions))?),
        _ => None,
    };
    let head_channels: Vec<usize> = match spec.fusion_channels().filter(|_| spec.fusion.is_some()) {
        Some(ch) => ch.to_vec(),
        None => vec![spec.stages.last().map(|s| s.channels).unwrap_or(e.channels)],
    };
    let heads = head_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            b.scoped(&format!("head{i}"), |b| {
                Ok(Head {
                    neuron,
                    conv: Conv::build(b, ConvGeom::same(c, spec.num_classes, 1, 1), true)?,
                })
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Network {
            spec: spec.clone(),
            encoding,
            stages,
            smfm,
            heads,
        },
        store,
    ))
}

impl Network {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Output> {
        let s = cx.g.shape(x);
        if s.c != self.spec.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, s.c
            )));
        }
        let encoded = cx.scoped("encoding", |cx| {
            let z = self.encoding.conv.forward(cx, x)?;
            self.encoding.bn.forward(cx, z)
        })?;
        let mut h = encoded;
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for (i, blocks) in self.stages.iter().enumerate() {
            h = cx.scoped(&format!("stage{}", i + 1), |cx| {
                let mut h = h;
                for (j, blk) in blocks.iter().enumerate() {
                    h = cx.scoped(&format!("block{j}"), |cx| blk.forward(cx, h))?;
                }
                Ok(h)
            })?;
            stage_out.push(h);
        }
        // The SPPF slot is a pass-through.
        let levels = match &self.smfm {
            Some(m) => {
                let n = stage_out.len();
                let input = [stage_out[n - 3], stage_out[n - 2], stage_out[n - 1]];
                Some(cx.scoped("smfm", |cx| m.forward(cx, input))?)
            }
            None => None,
        };
        let features: Vec<Var> = match levels {
            Some(l) => l.to_vec(),
            None => vec![h],
        };
        let mut logits = None;
        for (i, (head, f)) in self.heads.iter().zip(features).enumerate() {
            let l = cx.scoped(&format!("head{i}"), |cx| head.forward(cx, f))?;
            logits = Some(match logits {
                Some(acc) => cx.g.add(acc, l)?,
                None => l,
            });
        }
        let logits = logits.ok_or_else(|| Error::Invariant("network has no heads".into()))?;
        Ok(Output {
            logits,
            encoded,
            stages: stage_out,
            levels,
        })
    }

    /// Absorbs fusion constants on resampled edges into tdBN parameters.
    pub fn fold_fusion_constants(&mut self, store: &mut ParamStore) {
        if let Some(m) = &mut self.smfm {
            m.fold_constants(store);
        }
    }
}
