use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Category, Sample};
use crate::error::{Error, Result};
use crate::geometry::LanePolyline;
use crate::init::seeded_var_builder;
use crate::losses::LossComponents;

use super::config::{ModelConfig, TrainConfig};
use super::model::{images_to_tensor, LaneDetector};
use super::targets::{assemble_batch, build_sample_targets, SampleTargets};

/// A sample with its image tensor and encoded targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// `3 x H x W`, centred.
    pub image: Tensor,
    pub targets: SampleTargets,
    pub category: Category,
}

impl PreparedSample {
    pub fn lanes(&self) -> &[LanePolyline] {
        &self.targets.lanes
    }
}

pub fn prepare_samples(samples: &[Sample], cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                image: images_to_tensor(&[&s.image], dtype, device)?.squeeze(0)?,
                targets: build_sample_targets(&s.lanes, cfg)?,
                category: s.category,
            })
        })
        .collect()
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub components: LossComponents,
}

pub struct Trainer {
    pub model: LaneDetector,
    pub varmap: VarMap,
    pub train: TrainConfig,
    opt: AdamW,
    dtype: DType,
    device: Device,
    pub step: u64,
    pub epoch: usize,
}

impl Trainer {
    /// Fresh parameters drawn from the training seed.
    pub fn new(model_cfg: &ModelConfig, train: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        train.validate()?;
        let varmap = VarMap::new();
        let vb = seeded_var_builder(&varmap, train.seed, dtype, device);
        let model = LaneDetector::new(model_cfg, vb)?;
        Self::from_parts(model, varmap, train, dtype, device)
    }

    pub fn from_parts(model: LaneDetector, varmap: VarMap, train: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        let opt = AdamW::new(
            varmap.all_vars(),
            ParamsAdamW {
                lr: train.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            varmap,
            train: train.clone(),
            opt,
            dtype,
            device: device.clone(),
            step: 0,
            epoch: 0,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// Forward, loss, backward and one optimizer update. The total is formed
    /// in f64 from the components, so the logged total is the optimised one.
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<StepRecord> {
        let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
        let images = Tensor::stack(&images, 0)?;
        let targets: Vec<&SampleTargets> = batch.iter().map(|s| &s.targets).collect();
        let t = assemble_batch(&targets, self.model.config(), self.dtype, &self.device)?;
        let out = self.model.forward(&images)?;
        let losses = self.model.losses(&out, &t, &self.train.focal)?;
        let wide = crate::losses::LossTensors {
            point: losses.point.to_dtype(DType::F64)?,
            row: losses.row.to_dtype(DType::F64)?,
            range: losses.range.to_dtype(DType::F64)?,
            offset: losses.offset.to_dtype(DType::F64)?,
            state: losses.state.to_dtype(DType::F64)?,
        };
        let components = wide.values()?;
        let total = wide.total(&self.train.weights)?;
        let total_value = total.to_scalar::<f64>()?;
        if !components.is_finite() || !total_value.is_finite() {
            let dump = serde_json::to_string(&components)?;
            log::error!("non-finite loss at step {}: {dump}", self.step);
            return Err(Error::NonFiniteLoss {
                step: self.step,
                components: dump,
            });
        }
        self.opt.backward_step(&total)?;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            learning_rate: self.opt.learning_rate(),
            total: total_value,
            components,
        };
        self.step += 1;
        Ok(record)
    }

    /// One pass over `samples` in a seeded shuffled order. The learning rate
    /// follows the step decay for the current epoch.
    pub fn run_epoch(&mut self, samples: &[PreparedSample], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let lr = self
            .train
            .decay
            .learning_rate(self.train.learning_rate, self.epoch, self.train.epochs);
        self.opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.train.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let r = self.train_step(&batch)?;
            on_step(&r);
            records.push(r);
        }
        self.epoch += 1;
        Ok(records)
    }
}
