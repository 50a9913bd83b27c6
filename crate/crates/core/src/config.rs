//! Resolved run configuration. Every section has defaults, so a config file
//! only needs the keys it changes; the full record is persisted with each run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::anchors::GridConfig;
use crate::data::{ChannelRule, ResizeMode};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::inference::InferenceConfig;
use crate::loss::LossConfig;
use crate::model::{feature_map_size, BackboneKind, ModelConfig};

/// Task presets for grid step, hooking distance and NMS box side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Microcalcifications in mammograms.
    Mc,
    /// Microaneurysms in retina images.
    Ma,
    /// Small synthetic images with the tiny backbone.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Self::Mc),
            "ma" => Ok(Self::Ma),
            "desk" => Ok(Self::Desk),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?} (mc, ma, desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    pub step: usize,
    pub hooking_distance: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            step: 10,
            hooking_distance: 10.0,
        }
    }
}

impl GridSettings {
    /// Grid for images of the given size under the fixed downsampling of 32.
    pub fn grid_for(&self, height: usize, width: usize) -> GridConfig {
        let (fm_height, fm_width) = feature_map_size(height, width);
        GridConfig {
            image_height: height,
            image_width: width,
            fm_height,
            fm_width,
            step: self.step,
            hooking_distance: self.hooking_distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub backbone_kind: BackboneKind,
    pub head_channels: usize,
    pub head_depth: usize,
    pub pretrained: bool,
    /// Pixels per unit of raw regression output.
    pub offset_scale: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            backbone_kind: BackboneKind::Residual34,
            head_channels: 256,
            head_depth: 4,
            pretrained: false,
            offset_scale: 10.0,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, grid: &GridConfig) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone_kind: self.backbone_kind,
            downsample_factor: 32,
            head_channels: self.head_channels,
            head_depth: self.head_depth,
            anchors_per_position: grid.per_grid_count()?,
            pretrained: self.pretrained,
            offset_scale: self.offset_scale,
        };
        cfg.validate()?;
        cfg.check_grid(grid)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub channel_rule: ChannelRule,
    /// `(height, width)`; images keep their size when absent.
    pub target_size: Option<(usize, usize)>,
    pub resize_mode: ResizeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub seed: u64,
    /// Index of the test fold; the model trains on the other one.
    pub fold: usize,
    pub validation_fraction: f64,
    pub stratify: bool,
    /// Largest random translation, in pixels, applied to each training sample
    /// every epoch on top of the flips; 0 disables it.
    pub max_shift: usize,
    pub checkpoint_dir: PathBuf,
    pub loss: LossConfig,
    pub grid: GridSettings,
    pub model: ModelSettings,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub data: DataSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            initial_lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_patience: 3,
            seed: 0,
            fold: 0,
            validation_fraction: 0.3,
            stratify: false,
            max_shift: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            loss: LossConfig::default(),
            grid: GridSettings::default(),
            model: ModelSettings::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            data: DataSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self::default();
        match profile {
            Profile::Mc => {
                cfg.grid = GridSettings {
                    step: 10,
                    hooking_distance: 10.0,
                };
                cfg.inference.box_side = 7.0;
            }
            Profile::Ma => {
                cfg.grid = GridSettings {
                    step: 6,
                    hooking_distance: 6.0,
                };
                cfg.inference.box_side = 3.0;
                cfg.model.offset_scale = 6.0;
                cfg.data.channel_rule = ChannelRule::GreenExtract;
            }
            Profile::Desk => {
                cfg.grid = GridSettings {
                    step: 10,
                    hooking_distance: 10.0,
                };
                cfg.inference.box_side = 5.0;
                cfg.model.backbone_kind = BackboneKind::TinyDesk;
                cfg.model.head_channels = 64;
                cfg.initial_lr = 1e-3;
                cfg.max_shift = 16;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1), got {}", self.lr_decay_factor));
        }
        if self.lr_patience == 0 {
            return bad("lr_patience must be at least 1".into());
        }
        if self.fold > 1 {
            return bad(format!("fold must be 0 or 1, got {}", self.fold));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        self.loss.validate()?;
        self.inference.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Multiplies the learning rate by a factor once validation loss has failed
/// to improve for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}
