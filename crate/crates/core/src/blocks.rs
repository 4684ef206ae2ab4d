//! Residual blocks, multi-scale fusion, and the fusion module.
//!
//! Every block maps membrane-level reals to membrane-level reals: the first
//! operation inside any path is a spiking layer, and paths are summed before
//! the next block's neurons see them.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::ConvGeom;
use crate::neuron::Neuron;
use crate::nn::{Builder, Conv, Ctx, Lcb, ShortcutForm, TdBn};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{RealTensor, Shape};

/// tdBN `alpha` on the final layer of each path of a two-path MDS block,
/// so that the sum of two unit-variance paths has unit variance.
pub const MDS_PATH_ALPHA: f64 = FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockKind {
    Ms,
    Ems1,
    Ems2,
    Mds1,
    Mds2,
    Sf,
}

impl BlockKind {
    pub fn downsamples(self) -> bool {
        matches!(self, BlockKind::Ems1 | BlockKind::Ems2 | BlockKind::Mds2)
    }
}

/// Shortcut family used for MDS-style blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortcutStyle {
    /// Deformed shortcuts: a normalized 1x1 LCB (MDS1) or the weighted
    /// stride/maxpool mix (MDS2).
    #[default]
    Mds,
    /// Membrane shortcuts: identity (MDS1) or `LCB1x1(MaxPool(x))` (MDS2).
    Ms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Inner MS blocks on the residual path (MDS blocks only).
    #[serde(default)]
    pub residual_depth: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, channels_in: usize, channels_out: usize, residual_depth: usize) -> Self {
        Self {
            kind,
            channels_in,
            channels_out,
            residual_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (i, o) = (self.channels_in, self.channels_out);
        if i == 0 || o == 0 {
            return Err(Error::Config(format!("{:?} block has zero channels", self.kind)));
        }
        let ok = match self.kind {
            BlockKind::Ms | BlockKind::Sf | BlockKind::Mds1 => i == o,
            BlockKind::Ems1 => 2 * i == o,
            BlockKind::Ems2 | BlockKind::Mds2 => true,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{:?} block cannot map {i} to {o} channels",
                self.kind
            )));
        }
        if self.residual_depth > 0 && !matches!(self.kind, BlockKind::Mds1 | BlockKind::Mds2) {
            return Err(Error::Config(format!(
                "{:?} block has no inner residual blocks",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn out_shape(&self, x: Shape) -> Result<Shape> {
        if x.c != self.channels_in {
            return Err(Error::dim(format!(
                "{:?} block expects {} channels, got {}",
                self.kind, self.channels_in, x.c
            )));
        }
        if self.kind.downsamples() {
            check_even(x)?;
            Ok(x.with_c(self.channels_out).with_hw(x.h / 2, x.w / 2))
        } else {
            Ok(x.with_c(self.channels_out))
        }
    }
}

fn check_even(s: Shape) -> Result<()> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
        return Err(Error::dim(format!("downsampling needs even spatial dims, got {s}")));
    }
    Ok(())
}

fn check_channels(cx: &Ctx<'_>, x: Var, c: usize, what: &str) -> Result<()> {
    let s = cx.g.shape(x);
    if s.c != c {
        return Err(Error::dim(format!("{what} expects {c} channels, got {}", s.c)));
    }
    Ok(())
}

/// `y = LCB(LCB(x)) + x`.
#[derive(Clone, Debug)]
pub struct MsBlock {
    pub lcb1: Lcb,
    pub lcb2: Lcb,
}

impl MsBlock {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, neuron: Neuron, ch: usize) -> Result<Self> {
        Ok(Self {
            lcb1: Lcb::build(b, "lcb1", neuron, ConvGeom::same(ch, ch, 3, 1), 1.0)?,
            lcb2: Lcb::build(b, "lcb2", neuron, ConvGeom::same(ch, ch, 3, 1), 1.0)?,
        })
    }

    pub fn residual(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.lcb1.in_ch(), "MS block")?;
        let r = self.lcb1.forward(cx, x)?;
        self.lcb2.forward(cx, r)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let r = self.residual(cx, x)?;
        cx.g.add(r, x)
    }
}

/// Downsampling block with a max-pooled membrane shortcut.
#[derive(Clone, Debug)]
pub struct EmsBlock {
    pub variant: u8,
    pub lcb1: Lcb,
    pub lcb2: Lcb,
    pub shortcut: Lcb,
}

impl EmsBlock {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, neuron: Neuron, variant: u8, c_in: usize, c_out: usize) -> Result<Self> {
        let sc_out = match variant {
            1 => c_out / 2,
            2 => c_out,
            v => return Err(Error::Config(format!("unknown EMS variant {v}"))),
        };
        Ok(Self {
            variant,
            lcb1: Lcb::build(b, "lcb1", neuron, ConvGeom::same(c_in, c_out, 3, 2), 1.0)?,
            lcb2: Lcb::build(b, "lcb2", neuron, ConvGeom::same(c_out, c_out, 3, 1), 1.0)?,
            shortcut: Lcb::build(b, "shortcut", neuron, ConvGeom::same(c_in, sc_out, 1, 1), 1.0)?,
        })
    }

    pub fn residual(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let r = self.lcb1.forward(cx, x)?;
        self.lcb2.forward(cx, r)
    }

    pub fn shortcut(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let p = cx.g.maxpool2(x)?;
        let s = self.shortcut.forward(cx, p)?;
        if self.variant == 1 {
            cx.g.concat(p, s)
        } else {
            Ok(s)
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.lcb1.in_ch(), "EMS block")?;
        check_even(cx.g.shape(x))?;
        let r = self.residual(cx, x)?;
        let s = self.shortcut(cx, x)?;
        cx.g.add(r, s)
    }
}

/// Residual path shared by both MDS blocks: entry LCB, inner MS blocks,
/// and a 1x1 exit LCB.
#[derive(Clone, Debug)]
pub struct MdsResidual {
    pub entry: Lcb,
    pub inner: Vec<MsBlock>,
    pub exit: Lcb,
}

impl MdsResidual {
    fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        neuron: Neuron,
        entry: ConvGeom,
        depth: usize,
        exit_alpha: f64,
    ) -> Result<Self> {
        let c = entry.out_ch;
        let entry = Lcb::build(b, "res_in", neuron, entry, 1.0)?;
        let inner = (0..depth)
            .map(|i| b.scoped(&format!("ms{i}"), |b| MsBlock::build(b, neuron, c)))
            .collect::<Result<Vec<_>>>()?;
        let exit = Lcb::build(b, "res_out", neuron, ConvGeom::same(c, c, 1, 1), exit_alpha)?;
        Ok(Self { entry, inner, exit })
    }

    /// Residual path from the entry spikes.
    pub fn from_spikes(&self, cx: &mut Ctx<'_>, s: Var) -> Result<Var> {
        let mut h = self.entry.from_spikes(cx, s)?;
        for (i, blk) in self.inner.iter().enumerate() {
            h = cx.scoped(&format!("ms{i}"), |cx| blk.forward(cx, h))?;
        }
        self.exit.forward(cx, h)
    }
}

#[derive(Clone, Debug)]
pub enum Mds1Shortcut {
    Lcb(Lcb),
    Identity,
}

/// Non-downsampling MDS block.
#[derive(Clone, Debug)]
pub struct Mds1Block {
    pub residual: MdsResidual,
    pub shortcut: Mds1Shortcut,
}

impl Mds1Block {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, neuron: Neuron, ch: usize, depth: usize, style: ShortcutStyle) -> Result<Self> {
        let alpha = match style {
            ShortcutStyle::Mds => MDS_PATH_ALPHA,
            ShortcutStyle::Ms => 1.0,
        };
        let residual = MdsResidual::build(b, neuron, ConvGeom::same(ch, ch, 1, 1), depth, alpha)?;
        let shortcut = match style {
            ShortcutStyle::Mds => Mds1Shortcut::Lcb(Lcb::build(b, "shortcut", neuron, ConvGeom::same(ch, ch, 1, 1), alpha)?),
            ShortcutStyle::Ms => Mds1Shortcut::Identity,
        };
        Ok(Self { residual, shortcut })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.residual.entry.in_ch(), "MDS-Block1")?;
        let s = self.residual.entry.spikes(cx, x)?;
        let r = self.residual.from_spikes(cx, s)?;
        let sc = match &self.shortcut {
            Mds1Shortcut::Lcb(l) => l.from_spikes(cx, s)?,
            Mds1Shortcut::Identity => x,
        };
        cx.g.add(r, sc)
    }
}

/// Shortcut of the downsampling MDS block.
#[derive(Clone, Debug)]
pub enum Mds2Shortcut {
    /// `tdBN(conv1x1(w1 * stride2(s) + w2 * maxpool(s)))` on the block's
    /// input spikes `s`.
    Mixed { conv: Conv, bn: TdBn, w1: ParamId, w2: ParamId },
    /// `LCB1x1(MaxPool(x))` on the membrane input.
    Pooled(Lcb),
}

/// Downsampling MDS block.
#[derive(Clone, Debug)]
pub struct Mds2Block {
    pub residual: MdsResidual,
    pub shortcut: Mds2Shortcut,
}

impl Mds2Block {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        neuron: Neuron,
        c_in: usize,
        c_out: usize,
        depth: usize,
        style: ShortcutStyle,
    ) -> Result<Self> {
        let alpha = match style {
            ShortcutStyle::Mds => MDS_PATH_ALPHA,
            ShortcutStyle::Ms => 1.0,
        };
        let residual = MdsResidual::build(b, neuron, ConvGeom::same(c_in, c_out, 3, 2), depth, alpha)?;
        let geom = ConvGeom::same(c_in, c_out, 1, 1);
        let shortcut = match style {
            ShortcutStyle::Mds => b.scoped("shortcut", |b| -> Result<_> {
                Ok(Mds2Shortcut::Mixed {
                    conv: b.scoped("conv", |b| Conv::build(b, geom, false))?,
                    bn: b.scoped("bn", |b| TdBn::build(b, c_out, alpha, neuron.v_th())),
                    w1: b.constant("w1", vec![1], 0.5, ParamKind::Trainable),
                    w2: b.constant("w2", vec![1], 0.5, ParamKind::Trainable),
                })
            })?,
            ShortcutStyle::Ms => Mds2Shortcut::Pooled(Lcb::build(b, "shortcut", neuron, geom, alpha)?),
        };
        Ok(Self { residual, shortcut })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.residual.entry.in_ch(), "MDS-Block2")?;
        check_even(cx.g.shape(x))?;
        let s = self.residual.entry.spikes(cx, x)?;
        let r = self.residual.from_spikes(cx, s)?;
        let sc = match &self.shortcut {
            Mds2Shortcut::Mixed { conv, bn, w1, w2 } => cx.scoped("shortcut", |cx| {
                let a = cx.g.stride_downsample(s, 2)?;
                let m = cx.g.maxpool2(s)?;
                let (c1, c2) = (cx.store.scalar(*w1), cx.store.scalar(*w2));
                match cx.mode.form {
                    ShortcutForm::Train => {
                        let a = cx.g.scale(a, c1, Some(*w1));
                        let m = cx.g.scale(m, c2, Some(*w2));
                        let mix = cx.g.add(a, m)?;
                        let z = conv.forward(cx, mix)?;
                        bn.forward(cx, z)
                    }
                    ShortcutForm::Reparam => {
                        let folded = crate::layers::fold_tdbn_into_conv(&conv.spec(cx.store), &bn.params(cx.store))?;
                        let wa: Vec<f64> = folded.weight.iter().map(|w| w * c1).collect();
                        let wm: Vec<f64> = folded.weight.iter().map(|w| w * c2).collect();
                        let ya = cx.g.conv(a, conv.geom, &wa, Some(&folded.bias), None, None)?;
                        let ym = cx.g.conv(m, conv.geom, &wm, None, None, None)?;
                        cx.g.add(ya, ym)
                    }
                }
            })?,
            Mds2Shortcut::Pooled(l) => {
                let p = cx.g.maxpool2(x)?;
                l.forward(cx, p)?
            }
        };
        cx.g.add(r, sc)
    }
}

/// Fusion block: a two-path sum followed by an MS block.
#[derive(Clone, Debug)]
pub struct SfBlock {
    pub a1: Lcb,
    pub a2: Lcb,
    pub b1: Lcb,
    pub b2: Lcb,
    pub ms: MsBlock,
}

impl SfBlock {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, neuron: Neuron, ch: usize) -> Result<Self> {
        Ok(Self {
            a1: Lcb::build(b, "a1", neuron, ConvGeom::same(ch, ch, 3, 1), 1.0)?,
            a2: Lcb::build(b, "a2", neuron, ConvGeom::same(ch, ch, 3, 1), 1.0)?,
            b1: Lcb::build(b, "b1", neuron, ConvGeom::depthwise(ch, 3, 1), 1.0)?,
            b2: Lcb::build(b, "b2", neuron, ConvGeom::same(ch, ch, 1, 1), 1.0)?,
            ms: b.scoped("ms", |b| MsBlock::build(b, neuron, ch))?,
        })
    }

    /// First sub-block: `LCB(LCB(x)) + LCB1x1(LDCB(x))`.
    pub fn sub1(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.a1.in_ch(), "SF block")?;
        let s = self.a1.spikes(cx, x)?;
        let a = self.a1.from_spikes(cx, s)?;
        let a = self.a2.forward(cx, a)?;
        let d = self.b1.from_spikes(cx, s)?;
        let d = self.b2.forward(cx, d)?;
        cx.g.add(a, d)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.sub1(cx, x)?;
        cx.scoped("ms", |cx| self.ms.forward(cx, y))
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Ms(MsBlock),
    Ems(EmsBlock),
    Mds1(Mds1Block),
    Mds2(Mds2Block),
    Sf(SfBlock),
}

impl Block {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, spec: &BlockSpec, neuron: Neuron, style: ShortcutStyle) -> Result<Self> {
        spec.validate()?;
        let (i, o, d) = (spec.channels_in, spec.channels_out, spec.residual_depth);
        Ok(match spec.kind {
            BlockKind::Ms => Block::Ms(MsBlock::build(b, neuron, i)?),
            BlockKind::Ems1 => Block::Ems(EmsBlock::build(b, neuron, 1, i, o)?),
            BlockKind::Ems2 => Block::Ems(EmsBlock::build(b, neuron, 2, i, o)?),
            BlockKind::Mds1 => Block::Mds1(Mds1Block::build(b, neuron, i, d, style)?),
            BlockKind::Mds2 => Block::Mds2(Mds2Block::build(b, neuron, i, o, d, style)?),
            BlockKind::Sf => Block::Sf(SfBlock::build(b, neuron, i)?),
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Block::Ms(b) => b.forward(cx, x),
            Block::Ems(b) => b.forward(cx, x),
            Block::Mds1(b) => b.forward(cx, x),
            Block::Mds2(b) => b.forward(cx, x),
            Block::Sf(b) => b.forward(cx, x),
        }
    }
}

/// `sum_i c_i * x_i` on plain tensors.
pub fn fuse(features: &[RealTensor], constants: &[f64]) -> Result<RealTensor> {
    if features.is_empty() || features.len() != constants.len() {
        return Err(Error::Argument(format!(
            "fuse needs matching non-empty inputs, got {} features and {} constants",
            features.len(),
            constants.len()
        )));
    }
    let shape = features[0].shape();
    if let Some(f) = features.iter().find(|f| f.shape() != shape) {
        return Err(Error::dim(format!("cannot fuse {} with {}", shape, f.shape())));
    }
    if let Some(c) = constants.iter().find(|c| !c.is_finite()) {
        return Err(Error::Invariant(format!("fusion constant {c} is not finite")));
    }
    let mut out = vec![0.0; shape.numel()];
    for (f, &c) in features.iter().zip(constants) {
        out.iter_mut().zip(f.data()).for_each(|(o, v)| *o += c * v);
    }
    RealTensor::from_vec(shape, out)
}

// ---------------------------------------------------------------------------
// Multi-direction fusion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    TopDown,
    BottomUp,
}

/// One resampling edge: `from` level feeds `to` level during `pass`.
/// Levels are 0, 1, 2 for strides 8, 16, 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub pass: usize,
    pub direction: Direction,
    pub from: usize,
    pub to: usize,
}

/// Edge list for `directions` alternating passes starting top-down.
pub fn smfm_topology(directions: usize) -> Result<Vec<Edge>> {
    if ![1, 2, 4, 6].contains(&directions) {
        return Err(Error::Config(format!(
            "fusion direction count must be 1, 2, 4 or 6, got {directions}"
        )));
    }
    let mut edges = Vec::with_capacity(2 * directions);
    for pass in 0..directions {
        let (direction, pairs) = if pass % 2 == 0 {
            (Direction::TopDown, [(2, 1), (1, 0)])
        } else {
            (Direction::BottomUp, [(0, 1), (1, 2)])
        };
        for (from, to) in pairs {
            edges.push(Edge {
                pass,
                direction,
                from,
                to,
            });
        }
    }
    Ok(edges)
}

/// One fusion step: resample `from`, fuse with the lateral `to` feature,
/// refine with an SF block.
#[derive(Clone, Debug)]
pub struct FuseNode {
    pub edge: Edge,
    pub resample: Lcb,
    pub sf: SfBlock,
    pub c_lateral: ParamId,
    pub c_resampled: ParamId,
    /// `c_resampled` has been absorbed into `resample`'s tdBN.
    pub folded: bool,
}

#[derive(Clone, Debug)]
pub struct Smfm {
    pub directions: usize,
    pub channels: [usize; 3],
    pub nodes: Vec<FuseNode>,
}

impl Smfm {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, neuron: Neuron, channels: [usize; 3], directions: usize) -> Result<Self> {
        let edges = smfm_topology(directions)?;
        let nodes = edges
            .into_iter()
            .enumerate()
            .map(|(i, edge)| {
                b.scoped(&format!("node{i}"), |b| {
                    let (cf, ct) = (channels[edge.from], channels[edge.to]);
                    let geom = match edge.direction {
                        Direction::TopDown => ConvGeom::same(cf, ct, 1, 1),
                        Direction::BottomUp => ConvGeom::same(cf, ct, 3, 2),
                    };
                    Ok(FuseNode {
                        edge,
                        resample: Lcb::build(b, "resample", neuron, geom, 1.0)?,
                        sf: b.scoped("sf", |b| SfBlock::build(b, neuron, ct))?,
                        c_lateral: b.constant("c_lateral", vec![1], 1.0, ParamKind::Trainable),
                        c_resampled: b.constant("c_resampled", vec![1], 1.0, ParamKind::Trainable),
                        folded: false,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            directions,
            channels,
            nodes,
        })
    }

    /// Number of resampling edges.
    pub fn edge_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn out_shapes(&self, levels: [Shape; 3]) -> Result<[Shape; 3]> {
        for (i, s) in levels.iter().enumerate() {
            if s.c != self.channels[i] {
                return Err(Error::dim(format!(
                    "fusion level {i} expects {} channels, got {}",
                    self.channels[i], s.c
                )));
            }
        }
        for i in 0..2 {
            if levels[i].h != 2 * levels[i + 1].h || levels[i].w != 2 * levels[i + 1].w {
                return Err(Error::dim(format!(
                    "fusion levels {} and {} are not a factor 2 apart",
                    levels[i],
                    levels[i + 1]
                )));
            }
        }
        Ok(levels)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, levels: [Var; 3]) -> Result<[Var; 3]> {
        self.out_shapes(levels.map(|v| cx.g.shape(v)))?;
        let mut levels = levels;
        for (i, node) in self.nodes.iter().enumerate() {
            let out = cx.scoped(&format!("node{i}"), |cx| {
                let src = levels[node.edge.from];
                let r = node.resample.forward(cx, src)?;
                let r = match node.edge.direction {
                    Direction::TopDown => cx.g.upsample(r, 2)?,
                    Direction::BottomUp => r,
                };
                let r = if node.folded {
                    r
                } else {
                    let c = cx.store.scalar(node.c_resampled);
                    cx.g.scale(r, c, Some(node.c_resampled))
                };
                let c = cx.store.scalar(node.c_lateral);
                let lat = cx.g.scale(levels[node.edge.to], c, Some(node.c_lateral));
                let fused = cx.g.add(lat, r)?;
                cx.scoped("sf", |cx| node.sf.forward(cx, fused))
            })?;
            levels[node.edge.to] = out;
        }
        Ok(levels)
    }

    /// Moves each resampled-edge constant into the tdBN of its resampling
    /// LCB (`lambda` and `beta` scaled by the constant).
    pub fn fold_constants(&mut self, store: &mut ParamStore) {
        for node in self.nodes.iter_mut().filter(|n| !n.folded) {
            let c = store.scalar(node.c_resampled);
            node.resample.bn.absorb_scale(store, c);
            store.data_mut(node.c_resampled)[0] = 1.0;
            node.folded = true;
        }
    }
}
