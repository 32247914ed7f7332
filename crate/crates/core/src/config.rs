//! Declarative model and run configuration (TOML).
//!
//! A run config bundles the model architecture, dataset, training plan,
//! optimizer and augmentation settings. Five presets ship with the crate;
//! see `presets/*.toml` for annotated examples of the schema.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentSpec, DatasetKind};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::train::TrainPlan;

/// One entry of the convolutional trunk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrunkEntry {
    /// Conv3-`channels` → BatchNorm → ReLU, then dropout if `dropout > 0`.
    Conv {
        channels: usize,
        pad: bool,
        #[serde(default)]
        dropout: f64,
    },
    /// 2×2 ceil-mode max pooling, then dropout if `dropout > 0`.
    Maxpool {
        #[serde(default)]
        dropout: f64,
    },
}

/// Fully connected classifier head:
/// FC-`hidden[0]` → BatchNorm → ReLU → Dropout(`dropout`) →
/// Dropconnect(`dropconnect`) FC-`hidden[1]` → ReLU → FC-classes → softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub dropconnect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Number of channel blocks (and subnetworks).
    pub split_count: usize,
    pub trunk: Vec<TrunkEntry>,
    pub base_head: HeadSpec,
    pub subnet_head: HeadSpec,
}

fn check_ratio(what: &str, r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} ratio {r} outside [0, 1)")))
    }
}

impl ModelConfig {
    pub fn last_conv_channels(&self) -> Option<usize> {
        self.trunk.iter().rev().find_map(|e| match e {
            TrunkEntry::Conv { channels, .. } => Some(*channels),
            TrunkEntry::Maxpool { .. } => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.split_count == 0 {
            return Err(Error::Config("split_count must be positive".into()));
        }
        let channels = self
            .last_conv_channels()
            .ok_or_else(|| Error::Config("trunk has no convolution".into()))?;
        if channels % self.split_count != 0 {
            return Err(Error::Config(format!(
                "last convolution has {channels} channels, not divisible by split_count {}",
                self.split_count
            )));
        }
        for e in &self.trunk {
            match *e {
                TrunkEntry::Conv { channels: 0, .. } => {
                    return Err(Error::Config("convolution with zero channels".into()))
                }
                TrunkEntry::Conv { dropout, .. } | TrunkEntry::Maxpool { dropout } => {
                    check_ratio("trunk dropout", dropout)?
                }
            }
        }
        for head in [&self.base_head, &self.subnet_head] {
            if head.hidden.contains(&0) {
                return Err(Error::Config("head with a zero-width hidden layer".into()));
            }
            check_ratio("head dropout", head.dropout)?;
            check_ratio("head dropconnect", head.dropconnect)?;
        }
        crate::model::trace_shapes(self).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Off,
    /// Fresh transform per image per epoch.
    #[default]
    On,
    /// Augmented copies generated once before training.
    Static,
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AugmentMode::Off),
            "on" => Ok(AugmentMode::On),
            "static" => Ok(AugmentMode::Static),
            other => Err(Error::Config(format!("augment mode must be on|off|static, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub ranges: AugmentSpec,
    /// Copies per image in `static` mode.
    #[serde(default = "one")]
    pub static_copies: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetKind,
    /// Falls back to `$ENSNET_DATA_DIR` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default = "one")]
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainPlan,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub augment: AugmentConfig,
}

pub const PRESETS: [(&str, &str); 5] = [
    ("paper-mnist", include_str!("../presets/paper-mnist.toml")),
    ("paper-fashion", include_str!("../presets/paper-fashion.toml")),
    ("paper-cifar10", include_str!("../presets/paper-cifar10.toml")),
    ("tiny-mnist", include_str!("../presets/tiny-mnist.toml")),
    ("tiny-cifar10", include_str!("../presets/tiny-cifar10.toml")),
];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset {name:?} (known: {})", known.join(", ")))
        })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.optimizer.validate()?;
        self.augment.ranges.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.model.input_shape != self.dataset.name.image_shape() {
            return Err(Error::Config(format!(
                "model input {:?} does not match {:?} images {:?}",
                self.model.input_shape,
                self.dataset.name,
                self.dataset.name.image_shape()
            )));
        }
        if matches!(self.dataset.train_limit, Some(0)) || matches!(self.dataset.test_limit, Some(0)) {
            return Err(Error::Config("dataset limits must be positive".into()));
        }
        Ok(())
    }
}
