use candle_core::{DType, Device, IndexOp, Tensor};
use candle_nn::VarBuilder;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::geometry::{decode_lane, extract_proposal_points, LanePolyline, ProposalPeak};
use crate::heads::{
    conditional_forward, expected_locations, gather_kernels_batched, param_channels, ProposalHead,
    ProposalOutput, ShapeHead,
};
use crate::losses::{
    focal_point_loss, offset_loss, range_loss, rim_state_loss, row_loss, FocalParams, LossTensors,
};
use crate::rim::Rim;

use super::config::{ModelConfig, PROPOSAL_DOWNSCALE};
use super::targets::BatchTargets;

/// Stacks `3 x H x W` images in [0, 1] into a centred `B x 3 x H x W` batch.
pub fn images_to_tensor(images: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("empty image batch".into()));
    };
    let dim = first.dim();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.dim() != dim {
            return Err(Error::Shape(format!("mixed image sizes {:?} and {:?}", dim, img.dim())));
        }
        data.extend(img.iter().map(|&v| v - 0.5));
    }
    Ok(Tensor::from_vec(data, (images.len(), dim.0, dim.1, dim.2), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub proposal: ProposalOutput,
    /// `B x 66 x Y x X`.
    pub shared: Tensor,
}

/// Per-instance head outputs.
#[derive(Debug, Clone)]
pub struct InstanceOutputs {
    /// `N x Y x X`, raw.
    pub location_map: Tensor,
    /// `N x Y x X`.
    pub offset_map: Tensor,
    /// `N x Y`, column units.
    pub expected: Tensor,
    /// `N x Y x 2`.
    pub range_logits: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub lane: LanePolyline,
    /// Heatmap value at the proposal cell.
    pub score: f64,
    /// Proposal cell `(x, y)`.
    pub cell: (usize, usize),
    /// Recurrence step that produced the kernel (0 without the recurrent module).
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub peaks: Vec<ProposalPeak>,
    /// Sequence length emitted per peak.
    pub steps: Vec<usize>,
    pub lanes: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct LaneDetector {
    cfg: ModelConfig,
    backbone: Backbone,
    proposal: ProposalHead,
    shape: ShapeHead,
    rim: Option<Rim>,
}

impl LaneDetector {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone.fpn_channels;
        let g = cfg.backbone.norm_groups;
        let grid = cfg.shape_grid()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(&cfg.backbone, vb.pp("backbone"))?,
            proposal: ProposalHead::new(c, cfg.head_hidden, param_channels(cfg.rim.enabled), g, vb.pp("proposal"))?,
            shape: ShapeHead::new(c, grid.cols, g, vb.pp("shape"))?,
            rim: if cfg.rim.enabled {
                Some(Rim::new(cfg.rim.hidden, vb.pp("rim"))?)
            } else {
                None
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let (_, _, h, w) = images.dims4()?;
        if (h, w) != (self.cfg.image.height, self.cfg.image.width) {
            return Err(Error::Shape(format!(
                "model expects {}x{} images, got {h}x{w}",
                self.cfg.image.height, self.cfg.image.width
            )));
        }
        let pyramid = self.backbone.forward(images)?;
        let proposal = self.proposal.forward(pyramid.level(PROPOSAL_DOWNSCALE)?, (h, w))?;
        let shared = self
            .shape
            .shared_forward(pyramid.level(self.cfg.variant().shape_downscale())?)?;
        Ok(ForwardOutput { proposal, shared })
    }

    /// Dynamic-kernel outputs. `shared` is `N x 66 x Y x X` or `66 x Y x X`.
    pub fn instance_outputs(&self, shared: &Tensor, kernels: &Tensor) -> Result<InstanceOutputs> {
        let (location_map, offset_map) = conditional_forward(shared, kernels)?;
        let expected = expected_locations(&location_map)?;
        let range_logits = self.shape.vertical_range_forward(&location_map)?;
        Ok(InstanceOutputs {
            location_map,
            offset_map,
            expected,
            range_logits,
        })
    }

    /// Per-row range logits `N x Y x 2` for raw location maps `N x Y x X`.
    pub fn range_logits(&self, location_map: &Tensor) -> Result<Tensor> {
        self.shape.vertical_range_forward(location_map)
    }

    /// Kernels for every supervised instance: gathered directly at the
    /// ground-truth cells, or teacher-forced through the recurrent module.
    /// Also returns the state logits (`N x 2`) when the module is on.
    fn training_kernels(&self, param_map: &Tensor, t: &BatchTargets) -> Result<(Tensor, Option<Tensor>)> {
        let features = gather_kernels_batched(param_map, &t.points)?;
        match &self.rim {
            None => {
                let idx: Vec<u32> = t.instance_slots.iter().map(|&(p, _)| p as u32).collect();
                let idx = Tensor::from_vec(idx, t.n_instances(), param_map.device())?;
                Ok((features.index_select(&idx, 0)?, None))
            }
            Some(rim) => {
                let p = t.points.len();
                let steps = rim.unroll_fixed(&features, t.max_steps())?;
                let (states, kernels): (Vec<Tensor>, Vec<Tensor>) = steps.into_iter().unzip();
                let idx: Vec<u32> = t
                    .instance_slots
                    .iter()
                    .map(|&(pi, step)| (step * p + pi) as u32)
                    .collect();
                let idx = Tensor::from_vec(idx, t.n_instances(), param_map.device())?;
                let kernels = Tensor::cat(&kernels, 0)?.index_select(&idx, 0)?;
                let states = Tensor::cat(&states, 0)?.index_select(&idx, 0)?;
                Ok((kernels, Some(states)))
            }
        }
    }

    /// The five loss components for one batch. Disabled parts report 0.
    pub fn losses(&self, out: &ForwardOutput, t: &BatchTargets, focal: &FocalParams) -> Result<LossTensors> {
        let dtype = out.shared.dtype();
        let device = out.shared.device();
        let zero = Tensor::zeros((), dtype, device)?;
        let point = focal_point_loss(&out.proposal.heatmap, &t.heatmap, focal)?.mean(0)?;
        if t.n_instances() == 0 {
            return Ok(LossTensors {
                point,
                row: zero.clone(),
                range: zero.clone(),
                offset: zero.clone(),
                state: zero,
            });
        }
        let (kernels, states) = self.training_kernels(&out.proposal.param_map, t)?;
        let shared = out.shared.index_select(&t.instance_sample, 0)?;
        let inst = self.instance_outputs(&shared, &kernels)?;
        let weighted = |per: Tensor| -> Result<Tensor> { Ok((per * &t.instance_weight)?.sum_all()?) };
        let row = weighted(row_loss(&inst.expected, &t.loc, &t.valid)?)?;
        let range = weighted(range_loss(&inst.range_logits, &t.valid)?)?;
        let offset = if self.cfg.offset_enabled {
            weighted(offset_loss(&inst.offset_map, &t.offset, &t.offset_mask)?)?
        } else {
            zero.clone()
        };
        let state = match states {
            Some(s) => rim_state_loss(&s, &t.continue_labels)?,
            None => zero,
        };
        Ok(LossTensors {
            point,
            row,
            range,
            offset,
            state,
        })
    }

    /// Full inference on a batch of images.
    pub fn detect(&self, images: &Tensor, threshold: f64) -> Result<Vec<ImageDetections>> {
        let out = self.forward(images)?;
        let b = images.dim(0)?;
        (0..b).map(|i| self.detect_one(&out, i, threshold)).collect()
    }

    fn detect_one(&self, out: &ForwardOutput, index: usize, threshold: f64) -> Result<ImageDetections> {
        let heat = out.proposal.heatmap.i((index, 0))?.to_dtype(DType::F64)?;
        let (hp, wp) = heat.dims2()?;
        let heat = Array2::from_shape_vec((hp, wp), heat.flatten_all()?.to_vec1::<f64>()?)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let peaks = extract_proposal_points(&heat, threshold);
        let mut result = ImageDetections {
            peaks: peaks.clone(),
            steps: Vec::new(),
            lanes: Vec::new(),
        };
        if peaks.is_empty() {
            return Ok(result);
        }
        let cells: Vec<_> = peaks.iter().map(|p| (index, p.x, p.y)).collect();
        let features = gather_kernels_batched(&out.proposal.param_map, &cells)?;
        // (peak, step) per kernel row
        let mut owners = Vec::new();
        let kernels = match &self.rim {
            None => {
                owners.extend((0..peaks.len()).map(|k| (k, 0)));
                result.steps = vec![1; peaks.len()];
                features
            }
            Some(rim) => {
                let mut ks = Vec::new();
                for k in 0..peaks.len() {
                    let steps = rim.unroll(&features.i(k)?, self.cfg.rim.max_steps)?;
                    result.steps.push(steps.len());
                    for (t, s) in steps.into_iter().enumerate() {
                        owners.push((k, t));
                        ks.push(s.kernel);
                    }
                }
                Tensor::stack(&ks, 0)?
            }
        };
        let shared = out.shared.i(index)?;
        let inst = self.instance_outputs(&shared, &kernels)?;
        let expected: Vec<Vec<f64>> = inst.expected.to_dtype(DType::F64)?.to_vec2()?;
        let ranges: Vec<Vec<Vec<f64>>> = inst.range_logits.to_dtype(DType::F64)?.to_vec3()?;
        let offsets: Vec<Vec<Vec<f64>>> = inst.offset_map.to_dtype(DType::F64)?.to_vec3()?;
        let grid = self.cfg.shape_grid()?;
        for (n, &(k, step)) in owners.iter().enumerate() {
            let logits: Vec<[f64; 2]> = ranges[n].iter().map(|r| [r[0], r[1]]).collect();
            let off = if self.cfg.offset_enabled {
                Some(
                    Array2::from_shape_vec((grid.rows, grid.cols), offsets[n].concat())
                        .map_err(|e| Error::Shape(e.to_string()))?,
                )
            } else {
                None
            };
            if let Some(lane) = decode_lane(&expected[n], &logits, off.as_ref(), &grid)? {
                result.lanes.push(Detection {
                    lane,
                    score: peaks[k].score,
                    cell: (peaks[k].x, peaks[k].y),
                    step,
                });
            }
        }
        Ok(result)
    }
}
