//! Parameter-backed layers that build onto a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnArgs, BnStats, Graph, Var};
use crate::layers::{self, BnMode, ConvGeom, ConvSpec, TdBNParams, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use crate::neuron::{Neuron, SpikeMode};
use crate::params::{ParamId, ParamKind, ParamStore};

/// Which form the MDS-Block2 shortcut takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortcutForm {
    /// Weighted stride/maxpool mix followed by one 1x1 conv and tdBN.
    #[default]
    Train,
    /// Two folded 1x1 convs, one per pooling path. Needs eval-mode tdBN.
    Reparam,
}

/// How a forward pass behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub bn: BnMode,
    /// Update tdBN running statistics (batch-statistics mode only).
    pub update_stats: bool,
    pub spike: SpikeMode,
    pub form: ShortcutForm,
}

impl Mode {
    pub fn train() -> Self {
        Self {
            bn: BnMode::Train,
            update_stats: true,
            spike: SpikeMode::Integer,
            form: ShortcutForm::Train,
        }
    }

    pub fn eval() -> Self {
        Self {
            bn: BnMode::Eval,
            update_stats: false,
            spike: SpikeMode::Integer,
            form: ShortcutForm::Train,
        }
    }

    /// Eval mode with reparameterized shortcuts.
    pub fn inference() -> Self {
        Self {
            form: ShortcutForm::Reparam,
            ..Self::eval()
        }
    }

    pub fn with_spike(self, spike: SpikeMode) -> Self {
        Self { spike, ..self }
    }

    pub fn frozen_stats(self) -> Self {
        Self {
            update_stats: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.form == ShortcutForm::Reparam && self.bn != BnMode::Eval {
            return Err(Error::Mode("reparameterized shortcuts require eval-mode tdBN".into()));
        }
        Ok(())
    }
}

/// Graph, parameters and mode for one forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a mut ParamStore, mode: Mode) -> Result<Self> {
        mode.validate()?;
        Ok(Self { g, store, mode })
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.g.push_scope(name);
        let r = f(self);
        self.g.pop_scope();
        r
    }
}

/// Creates named parameters under a hierarchical prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    pub fn he_uniform(&mut self, leaf: &str, dims: Vec<usize>, fan_in: usize) -> ParamId {
        let name = self.name(leaf);
        self.store.he_uniform(name, dims, fan_in, self.rng)
    }

    pub fn constant(&mut self, leaf: &str, dims: Vec<usize>, value: f64, kind: ParamKind) -> ParamId {
        let name = self.name(leaf);
        self.store.constant(name, dims, value, kind)
    }
}

/// Convolution with learnable weight and optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, geom: ConvGeom, bias: bool) -> Result<Self> {
        geom.validate()?;
        let dims = vec![geom.out_ch, geom.in_per_group(), geom.kernel, geom.kernel];
        let weight = b.he_uniform("weight", dims, geom.fan_in());
        let bias = bias.then(|| b.constant("bias", vec![geom.out_ch], 0.0, ParamKind::Trainable));
        Ok(Self { geom, weight, bias })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let bias = self.bias.map(|id| cx.store.data(id));
        cx.g.conv(x, self.geom, cx.store.data(self.weight), bias, Some(self.weight), self.bias)
    }

    pub fn spec(&self, store: &ParamStore) -> ConvSpec {
        ConvSpec {
            geom: self.geom,
            weight: store.data(self.weight).to_vec(),
            bias: self
                .bias
                .map(|id| store.data(id).to_vec())
                .unwrap_or_else(|| vec![0.0; self.geom.out_ch]),
        }
    }
}

/// tdBN with learnable `lambda`, `beta` and running statistics buffers.
#[derive(Clone, Debug)]
pub struct TdBn {
    pub channels: usize,
    pub alpha: f64,
    pub v_th: f64,
    pub lambda: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl TdBn {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, channels: usize, alpha: f64, v_th: f64) -> Self {
        Self {
            channels,
            alpha,
            v_th,
            lambda: b.constant("lambda", vec![channels], 1.0, ParamKind::Trainable),
            beta: b.constant("beta", vec![channels], 0.0, ParamKind::Trainable),
            mean: b.constant("running_mean", vec![channels], 0.0, ParamKind::Buffer),
            var: b.constant("running_var", vec![channels], 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let store = &*cx.store;
        let args = BnArgs {
            lambda: store.data(self.lambda),
            beta: store.data(self.beta),
            alpha: self.alpha,
            v_th: self.v_th,
            eps: DEFAULT_BN_EPS,
            lambda_param: Some(self.lambda),
            beta_param: Some(self.beta),
        };
        match cx.mode.bn {
            BnMode::Train => {
                let (y, stats) = cx.g.bn(x, args, BnStats::Batch)?;
                if cx.mode.update_stats {
                    if let Some((mean, var)) = stats {
                        let s = cx.g.shape(x);
                        let count = s.frames() * s.plane();
                        let mut mu = cx.store.data(self.mean).to_vec();
                        let vr = cx.store.data_mut(self.var);
                        layers::update_running_stats(&mut mu, vr, DEFAULT_BN_MOMENTUM, &mean, &var, count);
                        cx.store.data_mut(self.mean).copy_from_slice(&mu);
                    }
                }
                Ok(y)
            }
            BnMode::Eval => {
                let stats = BnStats::Running {
                    mean: store.data(self.mean),
                    var: store.data(self.var),
                };
                Ok(cx.g.bn(x, args, stats)?.0)
            }
        }
    }

    /// Snapshot as eval-mode [`TdBNParams`].
    pub fn params(&self, store: &ParamStore) -> TdBNParams {
        TdBNParams {
            lambda: store.data(self.lambda).to_vec(),
            beta: store.data(self.beta).to_vec(),
            alpha: self.alpha,
            v_th: self.v_th,
            mu_inf: store.data(self.mean).to_vec(),
            var_inf: store.data(self.var).to_vec(),
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
            mode: BnMode::Eval,
        }
    }

    /// Multiplies the output by `c` by scaling `lambda` and `beta`.
    pub fn absorb_scale(&self, store: &mut ParamStore, c: f64) {
        store.data_mut(self.lambda).iter_mut().for_each(|v| *v *= c);
        store.data_mut(self.beta).iter_mut().for_each(|v| *v *= c);
    }
}

/// Spiking neuron, convolution (no bias) and tdBN.
#[derive(Clone, Debug)]
pub struct Lcb {
    pub name: String,
    pub neuron: Neuron,
    pub conv: Conv,
    pub bn: TdBn,
}

impl Lcb {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, neuron: Neuron, geom: ConvGeom, bn_alpha: f64) -> Result<Self> {
        b.scoped(name, |b| {
            let conv = b.scoped("conv", |b| Conv::build(b, geom, false))?;
            let bn = b.scoped("bn", |b| TdBn::build(b, geom.out_ch, bn_alpha, neuron.v_th()));
            Ok(Self {
                name: name.to_string(),
                neuron,
                conv,
                bn,
            })
        })
    }

    pub fn in_ch(&self) -> usize {
        self.conv.geom.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.conv.geom.out_ch
    }

    /// Spiking layer on `x`, named after this LCB.
    pub fn spikes(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (neuron, spike) = (self.neuron, cx.mode.spike);
        cx.scoped(&self.name, |cx| Ok(cx.g.spike(x, neuron, spike)))
    }

    /// Convolution and tdBN on already-computed spikes.
    pub fn from_spikes(&self, cx: &mut Ctx<'_>, s: Var) -> Result<Var> {
        cx.scoped(&self.name, |cx| {
            let z = self.conv.forward(cx, s)?;
            self.bn.forward(cx, z)
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = self.spikes(cx, x)?;
        self.from_spikes(cx, s)
    }

    /// Conv and eval-mode tdBN folded into one biased convolution.
    pub fn folded(&self, store: &ParamStore) -> Result<ConvSpec> {
        layers::fold_tdbn_into_conv(&self.conv.spec(store), &self.bn.params(store))
    }
}
