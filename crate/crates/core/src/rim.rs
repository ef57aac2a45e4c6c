//! Recurrent instance module.
//!
//! Several lanes can share one proposal cell (forks, dense lines). From the
//! cell's 128-dim feature an LSTM emits, step after step, a kernel vector and
//! a two-way state (`continue`, `stop`). The feature is fed again at every
//! step. Each emitted step yields one lane, including the stopping one.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LanePolyline;
use crate::heads::{KERNEL_DIM, RIM_FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RimState {
    Continue,
    Stop,
}

impl RimState {
    pub fn index(self) -> usize {
        match self {
            RimState::Continue => 0,
            RimState::Stop => 1,
        }
    }

    /// Decision from `[continue, stop]` logits; ties continue.
    pub fn from_logits(logits: [f64; 2]) -> Self {
        if logits[1] > logits[0] {
            RimState::Stop
        } else {
            RimState::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RimConfig {
    pub enabled: bool,
    pub max_steps: usize,
    pub hidden: usize,
}

impl Default for RimConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_steps: 5,
            hidden: RIM_FEATURE_DIM,
        }
    }
}

/// Short- and long-term memory, `P x hidden` each.
#[derive(Debug, Clone)]
pub struct RimMemory {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone)]
pub struct RimStep {
    pub state_logits: [f64; 2],
    pub state: RimState,
    /// `134`-entry kernel vector.
    pub kernel: Tensor,
}

#[derive(Debug, Clone)]
pub struct Rim {
    input: Linear,
    recurrent: Linear,
    state_head: Linear,
    kernel_head: Linear,
    hidden: usize,
}

impl Rim {
    pub fn new(hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            input: candle_nn::linear(RIM_FEATURE_DIM, 4 * hidden, vb.pp("input"))?,
            recurrent: candle_nn::linear_no_bias(hidden, 4 * hidden, vb.pp("recurrent"))?,
            state_head: candle_nn::linear(hidden, 2, vb.pp("state"))?,
            kernel_head: candle_nn::linear(hidden, KERNEL_DIM, vb.pp("kernel"))?,
            hidden,
        })
    }

    pub fn initial_memory(&self, points: usize, dtype: DType, device: &candle_core::Device) -> Result<RimMemory> {
        let z = Tensor::zeros((points, self.hidden), dtype, device)?;
        Ok(RimMemory { h: z.clone(), c: z })
    }

    /// One recurrence for `P` points: returns the new memory, state logits
    /// `P x 2` and kernels `P x 134`.
    pub fn step(&self, feature: &Tensor, mem: &RimMemory) -> Result<(RimMemory, Tensor, Tensor)> {
        let gates = (self.input.forward(feature)? + self.recurrent.forward(&mem.h)?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        let f = candle_nn::ops::sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * &mem.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        let state = self.state_head.forward(&h)?;
        let kernel = self.kernel_head.forward(&h)?;
        Ok((RimMemory { h, c }, state, kernel))
    }

    /// Fixed-length unroll for training: `steps` pairs of (`P x 2`, `P x 134`).
    pub fn unroll_fixed(&self, features: &Tensor, steps: usize) -> Result<Vec<(Tensor, Tensor)>> {
        let (p, _) = features.dims2()?;
        let mut mem = self.initial_memory(p, features.dtype(), features.device())?;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (next, state, kernel) = self.step(features, &mem)?;
            mem = next;
            out.push((state, kernel));
        }
        Ok(out)
    }

    /// Emits steps for one 128-dim feature until the state is `stop` or
    /// `max_steps` steps have been produced.
    pub fn unroll(&self, feature: &Tensor, max_steps: usize) -> Result<Vec<RimStep>> {
        if max_steps == 0 {
            return Err(Error::Contract("max_steps must be >= 1".into()));
        }
        if feature.dims() != [RIM_FEATURE_DIM] {
            return Err(Error::Shape(format!(
                "expected a {RIM_FEATURE_DIM}-entry feature, got {:?}",
                feature.dims()
            )));
        }
        let f = feature.unsqueeze(0)?;
        let mut mem = self.initial_memory(1, f.dtype(), f.device())?;
        let mut steps = Vec::new();
        while steps.len() < max_steps {
            let (next, state, kernel) = self.step(&f, &mem)?;
            mem = next;
            let l: Vec<f64> = state.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
            let logits = [l[0], l[1]];
            let decision = RimState::from_logits(logits);
            steps.push(RimStep {
                state_logits: logits,
                state: decision,
                kernel: kernel.squeeze(0)?,
            });
            if decision == RimState::Stop {
                break;
            }
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherTargets {
    pub labels: Vec<RimState>,
    /// `order[t]` is the index of the instance supervised at step `t`.
    pub order: Vec<usize>,
}

/// State labels and step-to-instance assignment for lanes sharing one cell:
/// `m - 1` continues then a stop; instances in ascending mean abscissa.
pub fn rim_teacher_targets(instances: &[LanePolyline]) -> Result<TeacherTargets> {
    if instances.is_empty() {
        return Err(Error::Contract(
            "a proposal point needs at least one instance".into(),
        ));
    }
    let m = instances.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| instances[a].mean_x().total_cmp(&instances[b].mean_x()));
    let labels = (0..m)
        .map(|t| if t + 1 == m { RimState::Stop } else { RimState::Continue })
        .collect();
    Ok(TeacherTargets { labels, order })
}
