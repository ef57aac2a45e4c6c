use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Variant};
use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, ImageSpec};
use crate::losses::{FocalParams, LossWeights};
use crate::metrics::MatchConfig;
use crate::rim::RimConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Proposal heatmap resolution.
pub const PROPOSAL_DOWNSCALE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageSpec,
    pub backbone: BackboneConfig,
    pub rim: RimConfig,
    pub offset_enabled: bool,
    /// Hidden width of the proposal-head branches.
    pub head_hidden: usize,
    /// Half-width, in columns, of the offset supervision band.
    pub omega: usize,
    /// Gaussian spread of the proposal heatmap, in proposal cells.
    pub sigma: f64,
}

impl ModelConfig {
    pub fn for_variant(variant: Variant, image: ImageSpec) -> Self {
        Self {
            image,
            backbone: BackboneConfig::for_variant(variant),
            rim: RimConfig::default(),
            offset_enabled: true,
            head_hidden: 64,
            omega: 5,
            sigma: 2.0,
        }
    }

    /// Reduced widths and depths for CPU-sized experiments.
    pub fn compact(variant: Variant, image: ImageSpec) -> Self {
        let mut cfg = Self::for_variant(variant, image);
        cfg.backbone.stem_channels = 16;
        cfg.backbone.stage_channels = vec![16, 32, 64, 64];
        cfg.backbone.stage_blocks = vec![1, 1, 1, 1];
        cfg.backbone.fpn_channels = 32;
        cfg.backbone.norm_groups = 8;
        cfg.head_hidden = 32;
        cfg
    }

    pub fn variant(&self) -> Variant {
        self.backbone.variant
    }

    pub fn shape_grid(&self) -> Result<GridSpec> {
        GridSpec::at_downscale(self.image, self.variant().shape_downscale())
    }

    pub fn proposal_grid(&self) -> Result<GridSpec> {
        GridSpec::at_downscale(self.image, PROPOSAL_DOWNSCALE)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: String| Error::ConfigField {
            field: format!("model.{f}"),
            msg,
        };
        self.backbone.validate()?;
        if self.image.height % 32 != 0 || self.image.width % 32 != 0 || self.image.height == 0 {
            return Err(field(
                "image",
                format!(
                    "{}x{} must be a positive multiple of 32 on both sides",
                    self.image.height, self.image.width
                ),
            ));
        }
        let g = self.shape_grid()?;
        if g.rows < 2 || g.cols < 2 {
            return Err(field("image", "shape grid must be at least 2x2".into()));
        }
        if self.omega == 0 {
            return Err(field("omega", "must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(field("sigma", format!("must be > 0, got {}", self.sigma)));
        }
        if self.head_hidden == 0 || self.head_hidden % self.backbone.norm_groups != 0 {
            return Err(field(
                "head_hidden",
                format!(
                    "{} is not divisible into {} groups",
                    self.head_hidden, self.backbone.norm_groups
                ),
            ));
        }
        if crate::heads::SHAPE_CHANNELS % self.backbone.norm_groups != 0 {
            return Err(field("backbone.norm_groups", "must divide the shape-head width".into()));
        }
        if self.rim.max_steps == 0 || self.rim.hidden == 0 {
            return Err(field("rim", "max_steps and hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate multiplied by `factor` once `milestone` of the epochs are done.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub milestone: f64,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            milestone: 0.8,
            factor: 0.1,
        }
    }
}

impl StepDecay {
    pub fn learning_rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let at = (self.milestone * epochs as f64).floor() as usize;
        if epochs > 0 && epoch >= at {
            base * self.factor
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub decay: StepDecay,
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            decay: StepDecay::default(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: String| Error::ConfigField {
            field: format!("train.{f}"),
            msg,
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(field("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.decay.milestone) || !(self.decay.factor > 0.0) {
            return Err(field("decay", "milestone must lie in [0, 1] and factor be > 0".into()));
        }
        if !(self.focal.alpha_exp > 0.0 && self.focal.beta_exp > 0.0) {
            return Err(field("focal", "exponents must be > 0".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { threshold: 0.3 }
    }
}

/// Everything a run needs, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub data: SceneConfig,
    pub metrics: MatchConfig,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        let mut data = SceneConfig {
            image: model.image,
            ..SceneConfig::default()
        };
        if let Ok(n) = data.max_lanes() {
            data.lane_count[1] = data.lane_count[1].min(n);
            data.lane_count[0] = data.lane_count[0].min(data.lane_count[1]);
        }
        Self {
            schema_version: CONFIG_VERSION,
            model,
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            data,
            metrics: MatchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_VERSION {
            return Err(Error::ConfigField {
                field: "schema_version".into(),
                msg: format!("unsupported version {} (expected {CONFIG_VERSION})", self.schema_version),
            });
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.metrics.validate()?;
        if !(self.infer.threshold > 0.0 && self.infer.threshold <= 1.0) {
            return Err(Error::ConfigField {
                field: "infer.threshold".into(),
                msg: format!("must lie in (0, 1], got {}", self.infer.threshold),
            });
        }
        if self.data.image != self.model.image {
            return Err(Error::ConfigField {
                field: "data.image".into(),
                msg: "must equal model.image".into(),
            });
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
