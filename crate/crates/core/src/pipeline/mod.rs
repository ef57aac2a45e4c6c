//! End-to-end assembly: configuration, targets, model, training and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod targets;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, LoadedCheckpoint};
pub use eval::{detect_all, evaluate_lanes, row_error, Evaluation, ImageMatch};
pub use config::{InferConfig, ModelConfig, RunConfig, StepDecay, TrainConfig};
pub use model::{images_to_tensor, LaneDetector, Detection, ForwardOutput, ImageDetections, InstanceOutputs};
pub use targets::{assemble_batch, build_sample_targets, BatchTargets, SampleTargets};
pub use train::{prepare_samples, PreparedSample, StepRecord, Trainer};
