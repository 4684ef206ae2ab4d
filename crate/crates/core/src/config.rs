//! TOML experiment configuration.
//!
//! ```toml
//! seed = 0
//!
//! [network]
//! preset = "toy"            # toy | mdsnet10 | mdsnet18 | mdsnet34 | mdsnet104
//! width = 0.25              # mdsnet presets
//! in_channels = 1
//! num_classes = 2
//! enc_channels = 8          # toy preset
//! widths = [16, 32]         # toy preset
//! mds1_per_stage = 1        # toy preset
//! shortcut = "mds"          # mds | ms
//! fusion_directions = 4     # optional
//! # [network.spec] replaces the preset with a full network description.
//!
//! [neuron]
//! tau = 0.25
//! v_th = 1.0
//! d_max = 4
//! t_steps = 2               # optional, preset default otherwise
//!
//! [metrics]
//! lfsi_windows = [3]        # the first entry is the headline LFSI
//!
//! [simulate]
//! input = "x.sdt"           # .sdt tensor or .png image; random if absent
//! model = "model.sdl"       # optional trained weights
//! input_kind = "random"     # random | zeros
//! input_size = [32, 32]
//! batch = 1
//! sigma = 1.0
//!
//! [train]
//! task = "two_class"        # two_class | blob_count
//! epochs = 10
//!
//! [verify]
//! checks = ["prop1", "prop2", "variance", "isometry", "saturation"]
//! negative_control = false
//!
//! [encode]
//! events = "events.csv"     # or image = "frame.png"
//! t_steps = 4
//! window_us = 100000
//! width = 304
//! height = 240
//! output = "encoded.sdt"
//!
//! [output]
//! dir = "out"
//! format = "json"           # json | csv
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::ShortcutStyle;
use crate::codec::EncodingConfig;
use crate::error::{Error, Result};
use crate::metrics::LfsiConfig;
use crate::network::NetworkSpec;
use crate::neuron::{ILIFParams, Neuron, DEFAULT_D_MAX, DEFAULT_TAU, DEFAULT_V_TH};
use crate::train::{Task, TrainConfig};
use crate::verify::{VerifyConfig, CHECKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: String,
    pub width: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub enc_channels: usize,
    pub widths: Vec<usize>,
    pub mds1_per_stage: usize,
    pub shortcut: ShortcutStyle,
    pub fusion_directions: Option<usize>,
    pub spec: Option<NetworkSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            width: 0.25,
            in_channels: 1,
            num_classes: 2,
            enc_channels: 8,
            widths: vec![16, 32],
            mds1_per_stage: 1,
            shortcut: ShortcutStyle::Mds,
            fusion_directions: None,
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronConfig {
    pub tau: f64,
    pub v_th: f64,
    pub d_max: i32,
    pub t_steps: Option<usize>,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            v_th: DEFAULT_V_TH,
            d_max: DEFAULT_D_MAX,
            t_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub lfsi_windows: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { lfsi_windows: vec![3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    #[default]
    Random,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub input_kind: InputKind,
    pub input_size: [usize; 2],
    pub batch: usize,
    pub sigma: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            input: None,
            model: None,
            input_kind: InputKind::Random,
            input_size: [32, 32],
            batch: 1,
            sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            task: Task::TwoClass,
            epochs: 10,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            train_size: t.train_size,
            test_size: t.test_size,
            image_size: t.image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub checks: Vec<String>,
    pub negative_control: bool,
    pub prop1_trials: usize,
    pub prop2_samples: usize,
    pub variance_samples: usize,
    pub isometry_instances: usize,
    pub saturation_trials: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let v = VerifyConfig::default();
        Self {
            checks: CHECKS.iter().map(|s| s.to_string()).collect(),
            negative_control: false,
            prop1_trials: v.prop1_trials,
            prop2_samples: v.prop2_samples,
            variance_samples: v.variance_samples,
            isometry_instances: v.isometry_instances,
            saturation_trials: v.saturation_trials,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    pub events: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub t_steps: usize,
    pub window_us: u64,
    pub width: usize,
    pub height: usize,
    pub clip: Option<u32>,
    pub normalize: bool,
    pub output: PathBuf,
}

impl Default for EncodeSection {
    fn default() -> Self {
        Self {
            events: None,
            image: None,
            t_steps: 4,
            window_us: 100_000,
            width: 304,
            height: 240,
            clip: None,
            normalize: false,
            output: "encoded.sdt".into(),
        }
    }
}

impl EncodeSection {
    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            t_steps: self.t_steps,
            window_us: self.window_us,
            width: self.width,
            height: self.height,
            clip: self.clip,
            normalize: self.normalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            format: OutputFormat::Json,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub neuron: NeuronConfig,
    pub metrics: MetricsConfig,
    pub simulate: SimulateConfig,
    pub train: TrainSection,
    pub verify: VerifySection,
    pub encode: EncodeSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.simulate.input.as_mut(),
            self.simulate.model.as_mut(),
            self.encode.events.as_mut(),
            self.encode.image.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn neuron(&self) -> Result<Neuron> {
        let n = &self.neuron;
        Ok(Neuron::Ilif(ILIFParams::new(n.tau, n.v_th, n.d_max)?))
    }

    pub fn lfsi_windows(&self) -> Result<Vec<LfsiConfig>> {
        if self.metrics.lfsi_windows.is_empty() {
            return Err(Error::Config("metrics.lfsi_windows must not be empty".into()));
        }
        self.metrics.lfsi_windows.iter().map(|&s| LfsiConfig::new(s)).collect()
    }

    /// The network described by the `[network]` and `[neuron]` sections.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let n = &self.network;
        let mut spec = match (&n.spec, n.preset.as_str()) {
            (Some(s), _) => s.clone(),
            (None, "toy") => NetworkSpec::toy(n.in_channels, n.num_classes, n.enc_channels, &n.widths, n.mds1_per_stage),
            (None, p) => {
                let depth = p
                    .strip_prefix("mdsnet")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown network preset {p:?}")))?;
                NetworkSpec::mdsnet(depth, n.width, n.in_channels, n.num_classes)?
            }
        };
        if n.spec.is_none() {
            spec = spec.with_shortcut(n.shortcut);
            if let Some(d) = n.fusion_directions {
                spec = spec.with_fusion(d);
            }
            spec.neuron = self.neuron()?;
        }
        if let Some(t) = self.neuron.t_steps {
            spec.t_steps = t;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: self.seed,
            train_size: t.train_size,
            test_size: t.test_size,
            image_size: t.image_size,
            lfsi_window: self.metrics.lfsi_windows.first().copied().unwrap_or(3),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn verify_config(&self) -> VerifyConfig {
        let v = &self.verify;
        VerifyConfig {
            seed: self.seed,
            prop1_trials: v.prop1_trials,
            prop2_samples: v.prop2_samples,
            variance_samples: v.variance_samples,
            isometry_instances: v.isometry_instances,
            saturation_trials: v.saturation_trials,
            negative_control: v.negative_control,
            ..VerifyConfig::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fails with a config error when `path` does not exist.
pub fn require_file(path: &Path, key: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: file {} does not exist", path.display())))
    }
}
