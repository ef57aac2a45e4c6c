//! Residual backbone, feature pyramid and the convolutional transformer
//! encoder applied to the deepest stage.

use std::collections::BTreeMap;

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};

/// Model size tag. Decides the shape-head resolution and default depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Small,
    Medium,
    Large,
}

impl Variant {
    pub fn shape_downscale(self) -> usize {
        match self {
            Variant::Small | Variant::Medium => 8,
            Variant::Large => 4,
        }
    }

    /// Blocks per stage, mirroring ResNet-18/34/101.
    pub fn default_blocks(self) -> Vec<usize> {
        match self {
            Variant::Small => vec![2, 2, 2, 2],
            Variant::Medium => vec![3, 4, 6, 3],
            Variant::Large => vec![3, 4, 23, 3],
        }
    }
}

pub const PYRAMID_LEVELS: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub fpn_channels: usize,
    pub norm_groups: usize,
    pub encoder_enabled: bool,
    pub encoder_heads: usize,
}

impl BackboneConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            in_channels: 3,
            stem_channels: 32,
            stem_stride: 2,
            stage_channels: vec![32, 64, 128, 256],
            stage_blocks: variant.default_blocks(),
            stage_strides: vec![2, 2, 2, 2],
            fpn_channels: 64,
            norm_groups: 8,
            encoder_enabled: true,
            encoder_heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, msg: String| Error::ConfigField {
            field: format!("backbone.{field}"),
            msg,
        };
        let n = self.stage_channels.len();
        if n != 4 || self.stage_blocks.len() != 4 || self.stage_strides.len() != 4 {
            return Err(field(
                "stage_channels",
                "exactly 4 stages are required (channels, blocks and strides)".into(),
            ));
        }
        let mut scale = self.stem_stride;
        for (k, &s) in self.stage_strides.iter().enumerate() {
            scale *= s;
            if scale != PYRAMID_LEVELS[k] {
                return Err(field(
                    "stage_strides",
                    format!(
                        "stage {k} reaches downscale {scale}, expected {}",
                        PYRAMID_LEVELS[k]
                    ),
                ));
            }
        }
        if self.stage_blocks.contains(&0) {
            return Err(field("stage_blocks", "every stage needs a block".into()));
        }
        let mut all = self.stage_channels.clone();
        all.push(self.stem_channels);
        all.push(self.fpn_channels);
        if let Some(c) = all.iter().find(|&&c| c == 0 || c % self.norm_groups != 0) {
            return Err(field(
                "norm_groups",
                format!("{c} channels not divisible into {} groups", self.norm_groups),
            ));
        }
        if self.encoder_enabled {
            let c = self.stage_channels[3];
            if self.encoder_heads == 0 || c % self.encoder_heads != 0 || c % 4 != 0 {
                return Err(field(
                    "encoder_heads",
                    format!("deepest stage width {c} incompatible with {} heads", self.encoder_heads),
                ));
            }
        }
        Ok(())
    }
}

/// Pyramid levels keyed by downscale factor, all with `fpn_channels` maps.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, downscale: usize) -> Result<&Tensor> {
        self.levels
            .get(&downscale)
            .ok_or_else(|| Error::Shape(format!("no pyramid level at downscale {downscale}")))
    }
}

pub(crate) fn conv(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    bias: bool,
    vb: VarBuilder,
) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    if bias {
        candle_nn::conv2d(cin, cout, k, cfg, vb)
    } else {
        candle_nn::conv2d_no_bias(cin, cout, k, cfg, vb)
    }
}

/// Conv, group norm, optional ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
    relu: bool,
}

impl ConvNorm {
    pub(crate) fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        relu: bool,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            conv: conv(cin, cout, k, stride, false, vb.pp("conv"))?,
            norm: candle_nn::group_norm(groups, cout, 1e-5, vb.pp("norm"))?,
            relu,
        })
    }
}

impl Module for ConvNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = xs.apply(&self.conv)?.apply(&self.norm)?;
        if self.relu {
            ys.relu()
        } else {
            Ok(ys)
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, groups: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvNorm::new(cin, cout, 1, stride, groups, false, vb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            conv1: ConvNorm::new(cin, cout, 3, stride, groups, true, vb.pp("conv1"))?,
            conv2: ConvNorm::new(cout, cout, 3, 1, groups, false, vb.pp("conv2"))?,
            shortcut,
        })
    }
}

impl Module for BasicBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = xs.apply(&self.conv1)?.apply(&self.conv2)?;
        let skip = match &self.shortcut {
            Some(s) => xs.apply(s)?,
            None => xs.clone(),
        };
        (ys + skip)?.relu()
    }
}

#[derive(Debug, Clone)]
struct Fpn {
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
}

impl Fpn {
    fn new(in_channels: &[usize], out: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (k, &c) in in_channels.iter().enumerate() {
            lateral.push(conv(c, out, 1, 1, true, vb.pp(format!("lateral{k}")))?);
            output.push(conv(out, out, 3, 1, true, vb.pp(format!("output{k}")))?);
        }
        Ok(Self { lateral, output })
    }

    fn forward(&self, feats: &[Tensor]) -> candle_core::Result<Vec<Tensor>> {
        let n = feats.len();
        let mut merged: Vec<Option<Tensor>> = vec![None; n];
        let mut top = feats[n - 1].apply(&self.lateral[n - 1])?;
        merged[n - 1] = Some(top.clone());
        for k in (0..n - 1).rev() {
            let lat = feats[k].apply(&self.lateral[k])?;
            let (_, _, h, w) = lat.dims4()?;
            top = (lat + top.upsample_nearest2d(h, w)?)?;
            merged[k] = Some(top.clone());
        }
        merged
            .into_iter()
            .zip(&self.output)
            .map(|(m, conv)| m.expect("every level merged").apply(conv))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvNorm,
    stages: Vec<Vec<BasicBlock>>,
    encoder: Option<TransformerEncoder>,
    fpn: Fpn,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let stem = ConvNorm::new(cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride, g, true, vb.pp("stem"))?;
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, (&cout, (&blocks, &stride))) in cfg
            .stage_channels
            .iter()
            .zip(cfg.stage_blocks.iter().zip(&cfg.stage_strides))
            .enumerate()
        {
            let vbs = vb.pp(format!("stage{s}"));
            let mut stage = Vec::new();
            for b in 0..blocks {
                let st = if b == 0 { stride } else { 1 };
                stage.push(BasicBlock::new(cin, cout, st, g, vbs.pp(b))?);
                cin = cout;
            }
            stages.push(stage);
        }
        let encoder = if cfg.encoder_enabled {
            let ecfg = EncoderConfig {
                channels: cfg.stage_channels[3],
                heads: cfg.encoder_heads,
                ffn_channels: cfg.stage_channels[3] * 2,
            };
            Some(TransformerEncoder::new(&ecfg, vb.pp("encoder"))?)
        } else {
            None
        };
        let fpn = Fpn::new(&cfg.stage_channels, cfg.fpn_channels, vb.pp("fpn"))?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            encoder,
            fpn,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `image` is `B x C x H x W` (or `C x H x W` for one sample).
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let image = if image.rank() == 3 {
            image.unsqueeze(0)?
        } else {
            image.clone()
        };
        let (_, c, h, w) = image.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 32"
            )));
        }
        let mut x = image.apply(&self.stem)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = x.apply(block)?;
            }
            feats.push(x.clone());
        }
        if let Some(enc) = &self.encoder {
            feats[3] = enc.forward(&feats[3])?;
        }
        let outs = self.fpn.forward(&feats)?;
        Ok(FeaturePyramid {
            levels: PYRAMID_LEVELS.iter().copied().zip(outs).collect(),
        })
    }
}
