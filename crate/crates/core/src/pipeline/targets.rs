//! Training targets: per-sample encoding and batch assembly.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{encode_rowwise_targets, render_proposal_heatmap, LanePolyline, RowwiseTarget};
use crate::rim::{rim_teacher_targets, RimState};

use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub struct InstanceTarget {
    /// Index into [`SampleTargets::lanes`].
    pub lane: usize,
    pub step: usize,
    pub state: RimState,
    pub rows: RowwiseTarget,
}

#[derive(Debug, Clone)]
pub struct PointTarget {
    /// Proposal cell `(x, y)`.
    pub cell: (usize, usize),
    /// Indices into [`SampleTargets::instances`], in step order.
    pub instances: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleTargets {
    pub heatmap: Array2<f64>,
    pub points: Vec<PointTarget>,
    pub instances: Vec<InstanceTarget>,
    /// Lanes that survived encoding; unencodable ones are dropped.
    pub lanes: Vec<LanePolyline>,
}

/// Encodes the lanes of one image. Lanes too short for the shape grid are
/// dropped with a warning. With the recurrent module off, only the first
/// lane (ascending mean abscissa) of each start cell is supervised.
pub fn build_sample_targets(lanes: &[LanePolyline], cfg: &ModelConfig) -> Result<SampleTargets> {
    let grid = cfg.shape_grid()?;
    let grid_p = cfg.proposal_grid()?;
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for lane in lanes {
        match encode_rowwise_targets(lane, &grid, cfg.omega) {
            Ok(t) => {
                kept.push(lane.clone());
                rows.push(t);
            }
            Err(e @ (Error::DegenerateLane { .. } | Error::InvalidLane(_))) => {
                log::warn!("dropping lane from targets: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    let proposal = render_proposal_heatmap(&kept, &grid_p, cfg.sigma);
    let mut points = Vec::new();
    let mut instances = Vec::new();
    for p in &proposal.points {
        let group: Vec<LanePolyline> = p.lanes.iter().map(|&k| kept[k].clone()).collect();
        let teacher = rim_teacher_targets(&group)?;
        let steps = if cfg.rim.enabled {
            teacher.order.len().min(cfg.rim.max_steps)
        } else {
            1
        };
        let mut ids = Vec::new();
        for t in 0..steps {
            let lane = p.lanes[teacher.order[t]];
            // a truncated sequence still has to end on a stop
            let state = if t + 1 == steps { RimState::Stop } else { teacher.labels[t] };
            ids.push(instances.len());
            instances.push(InstanceTarget {
                lane,
                step: t,
                state,
                rows: rows[lane].clone(),
            });
        }
        points.push(PointTarget {
            cell: (p.x, p.y),
            instances: ids,
        });
    }
    Ok(SampleTargets {
        heatmap: proposal.heatmap,
        points,
        instances,
        lanes: kept,
    })
}

/// Tensors for one batch. Instances are listed point by point, step by step.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// `B x 1 x Hp x Wp`.
    pub heatmap: Tensor,
    /// `(sample, x, y)` per start cell.
    pub points: Vec<(usize, usize, usize)>,
    /// Sequence length per point.
    pub point_steps: Vec<usize>,
    /// `(point, step)` per instance.
    pub instance_slots: Vec<(usize, usize)>,
    /// Sample of each instance, `N` (u32).
    pub instance_sample: Tensor,
    /// `N x Y`, NaN outside the range.
    pub loc: Tensor,
    /// `N x Y`, 0/1.
    pub valid: Tensor,
    /// `N x Y x X`.
    pub offset: Tensor,
    /// `N x Y x X`, 0/1.
    pub offset_mask: Tensor,
    /// Aggregation weight per instance, `N`.
    pub instance_weight: Tensor,
    /// `N`, 1 for continue.
    pub continue_labels: Tensor,
}

impl BatchTargets {
    pub fn n_instances(&self) -> usize {
        self.instance_slots.len()
    }

    pub fn max_steps(&self) -> usize {
        self.point_steps.iter().copied().max().unwrap_or(0)
    }
}

pub fn assemble_batch(
    samples: &[&SampleTargets],
    cfg: &ModelConfig,
    dtype: DType,
    device: &Device,
) -> Result<BatchTargets> {
    let grid = cfg.shape_grid()?;
    let grid_p = cfg.proposal_grid()?;
    let (rows, cols) = (grid.rows, grid.cols);
    let b = samples.len();
    let mut heat = Vec::with_capacity(b * grid_p.rows * grid_p.cols);
    for s in samples {
        if s.heatmap.dim() != (grid_p.rows, grid_p.cols) {
            return Err(Error::Shape(format!(
                "heatmap target {:?} does not match the {}x{} proposal grid",
                s.heatmap.dim(),
                grid_p.rows,
                grid_p.cols
            )));
        }
        heat.extend(s.heatmap.iter().copied());
    }
    let heatmap = Tensor::from_vec(heat, (b, 1, grid_p.rows, grid_p.cols), device)?.to_dtype(dtype)?;

    let with_instances = samples.iter().filter(|s| !s.instances.is_empty()).count();
    let mut points = Vec::new();
    let mut point_steps = Vec::new();
    let mut slots = Vec::new();
    let mut inst_sample = Vec::new();
    let mut loc = Vec::new();
    let mut valid = Vec::new();
    let mut offset = Vec::new();
    let mut mask = Vec::new();
    let mut weight = Vec::new();
    let mut labels = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let w = 1.0 / (s.instances.len().max(1) * with_instances.max(1)) as f64;
        for p in &s.points {
            let pi = points.len();
            points.push((si, p.cell.0, p.cell.1));
            point_steps.push(p.instances.len());
            for &k in &p.instances {
                let inst = &s.instances[k];
                slots.push((pi, inst.step));
                inst_sample.push(si as u32);
                loc.extend(inst.rows.loc.iter().copied());
                valid.extend(inst.rows.valid.iter().map(|&v| v as u8 as f64));
                offset.extend(inst.rows.offset_map.iter().copied());
                mask.extend(inst.rows.offset_mask.iter().map(|&v| v as u8 as f64));
                weight.push(w);
                labels.push(if inst.state == RimState::Continue { 1.0 } else { 0.0 });
            }
        }
    }
    let n = slots.len();
    let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
    };
    Ok(BatchTargets {
        heatmap,
        points,
        point_steps,
        instance_slots: slots,
        instance_sample: Tensor::from_vec(inst_sample, n, device)?,
        loc: t(loc, &[n, rows])?,
        valid: t(valid, &[n, rows])?,
        offset: t(offset, &[n, rows, cols])?,
        offset_mask: t(mask, &[n, rows, cols])?,
        instance_weight: t(weight, &[n])?,
        continue_labels: t(labels, &[n])?,
    })
}
