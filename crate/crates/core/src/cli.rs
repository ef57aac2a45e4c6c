//! Command implementations behind the `condlane` binary.
//!
//! Every command writes only below its output directory and leaves a
//! manifest there describing how to reproduce it.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::annotations::read_tusimple;
use crate::data::{load_dataset, write_dataset, DatasetManifest, TUSIMPLE_FILE};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, ImageSpec, LanePolyline};
use crate::losses::LossComponents;
use crate::metrics::{tusimple_score, EvalReport, MatchConfig, SampledLanes, TusimpleReport};
use crate::pipeline::{
    detect_all, evaluate_lanes, images_to_tensor, load_checkpoint, prepare_samples, save_checkpoint,
    LaneDetector, ImageDetections, RunConfig, StepRecord, Trainer,
};
use crate::viz;

pub const RUN_MANIFEST: &str = "run.json";
pub const RUN_VERSION: u32 = 1;
pub const LOSS_LOG: &str = "loss.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const TUSIMPLE_REPORT: &str = "tusimple.json";

/// TuSimple point tolerance at its native 1280 px width.
const TUSIMPLE_TOLERANCE_PX: f64 = 20.0;
const TUSIMPLE_WIDTH: f64 = 1280.0;
const TUSIMPLE_LANE_ACCURACY: f64 = 0.85;

fn dir_has_entries(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && fs::read_dir(dir)?.next().is_some())
}

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

pub fn cmd_gen_data(config: &RunConfig, out: &Path, count: u64, force: bool) -> Result<DatasetManifest> {
    config.validate()?;
    let m = write_dataset(out, &config.data, count, force)?;
    log::info!(
        "wrote {} samples to {} (categories {:?})",
        m.entries.len(),
        out.display(),
        m.category_histogram
    );
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub mean_total: f64,
    pub mean_components: LossComponents,
}

impl EpochSummary {
    fn from_records(epoch: usize, records: &[StepRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mut c = LossComponents::default();
        for r in records {
            c.point += r.components.point / n;
            c.row += r.components.row / n;
            c.range += r.components.range / n;
            c.offset += r.components.offset / n;
            c.state += r.components.state / n;
        }
        Self {
            epoch,
            steps: records.len(),
            learning_rate: records.last().map_or(0.0, |r| r.learning_rate),
            mean_total: records.iter().map(|r| r.total).sum::<f64>() / n,
            mean_components: c,
        }
    }
}

/// Self-describing record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub dataset: String,
    pub dataset_digest: String,
    /// Checkpoint manifests, relative to the run directory.
    pub checkpoints: Vec<String>,
    pub loss_log: String,
    pub history: Vec<EpochSummary>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(RUN_MANIFEST))?)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub struct TrainOptions<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub force: bool,
}

/// Trains on a generated dataset. Checkpoints go to `out/checkpoints`, the
/// per-step loss log to `out/loss.jsonl`, the manifest to `out/run.json`.
pub fn cmd_train(config: &RunConfig, opts: &TrainOptions) -> Result<RunManifest> {
    config.validate()?;
    let (dataset, samples) = load_dataset(opts.data)?;
    if dataset.image() != config.model.image {
        return Err(Error::Refused(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            dataset.image().height,
            dataset.image().width,
            config.model.image.height,
            config.model.image.width
        )));
    }
    if opts.resume.is_none() && dir_has_entries(opts.out)? && !opts.force {
        return Err(Error::Refused(format!(
            "{} is not empty (pass --force to overwrite or --resume to continue)",
            opts.out.display()
        )));
    }
    fs::create_dir_all(opts.out)?;
    let ckpt_dir = opts.out.join("checkpoints");
    let device = Device::Cpu;
    let dtype = DType::F32;

    let (mut trainer, mut manifest) = match opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path, &device)?;
            if ck.manifest.model != config.model {
                return Err(Error::Refused(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            let mut t = Trainer::from_parts(ck.model, ck.varmap, &config.train, dtype, &device)?;
            t.step = ck.manifest.step;
            t.epoch = ck.manifest.epoch;
            let m = match RunManifest::read(opts.out) {
                Ok(m) => m,
                Err(_) => new_manifest(config, opts.data, &dataset)?,
            };
            log::info!("resuming at epoch {} step {}", t.epoch, t.step);
            (t, m)
        }
        None => {
            let t = Trainer::new(&config.model, &config.train, dtype, &device)?;
            let mut m = new_manifest(config, opts.data, &dataset)?;
            let _ = fs::remove_file(opts.out.join(LOSS_LOG));
            let p = save_checkpoint(&ckpt_dir, "epoch_0000", &config.model, &t.varmap, 0, 0)?;
            m.checkpoints.push(rel(&p, opts.out));
            m.write(opts.out)?;
            (t, m)
        }
    };
    fs::write(opts.out.join("config.toml"), config.to_toml()?)?;

    let prepared = prepare_samples(&samples, &config.model, dtype, &device)?;
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(opts.out.join(LOSS_LOG))?;
    let epochs = config.train.epochs;
    while trainer.epoch < epochs {
        let mut io_err = None;
        let records = trainer.run_epoch(&prepared, |r| {
            let line = serde_json::to_string(r).map_err(Error::from);
            let res = line.and_then(|l| writeln!(log_file, "{l}").map_err(Error::from));
            if let Err(e) = res {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        let summary = EpochSummary::from_records(trainer.epoch - 1, &records);
        log::info!(
            "epoch {}/{} loss {:.4} lr {:.2e}",
            trainer.epoch,
            epochs,
            summary.mean_total,
            summary.learning_rate
        );
        manifest.history.push(summary);
        let every = config.train.checkpoint_every;
        if trainer.epoch == epochs || (every > 0 && trainer.epoch % every == 0) {
            let p = save_checkpoint(
                &ckpt_dir,
                &format!("epoch_{:04}", trainer.epoch),
                &config.model,
                &trainer.varmap,
                trainer.step,
                trainer.epoch,
            )?;
            let r = rel(&p, opts.out);
            if !manifest.checkpoints.contains(&r) {
                manifest.checkpoints.push(r);
            }
        }
        manifest.write(opts.out)?;
    }
    manifest.write(opts.out)?;
    Ok(manifest)
}

fn new_manifest(config: &RunConfig, data: &Path, dataset: &DatasetManifest) -> Result<RunManifest> {
    Ok(RunManifest {
        schema_version: RUN_VERSION,
        config: config.clone(),
        seed: config.train.seed,
        dataset: data.display().to_string(),
        dataset_digest: dataset.digest()?,
        checkpoints: Vec::new(),
        loss_log: LOSS_LOG.into(),
        history: Vec::new(),
    })
}

/// Reports written by `eval`.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub tusimple: Option<TusimpleReport>,
}

pub struct EvalOptions<'a> {
    /// `None` scores the dataset's own labels as predictions.
    pub checkpoint: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub threshold: f64,
    pub metrics: MatchConfig,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<EvalOutcome> {
    let (dataset, samples) = load_dataset(opts.data)?;
    let image = dataset.image();
    let gts: Vec<Vec<LanePolyline>> = samples.iter().map(|s| s.lanes.clone()).collect();
    let preds = match opts.checkpoint {
        None => gts.clone(),
        Some(path) => {
            let ck = load_checkpoint(path, &Device::Cpu)?;
            if ck.manifest.model.image != image {
                return Err(Error::Refused(format!(
                    "checkpoint expects {}x{} images, dataset has {}x{}",
                    ck.manifest.model.image.height, ck.manifest.model.image.width, image.height, image.width
                )));
            }
            let dtype = ck.model_dtype();
            let imgs = samples
                .iter()
                .map(|s| Ok(images_to_tensor(&[&s.image], dtype, &Device::Cpu)?.squeeze(0)?))
                .collect::<Result<Vec<Tensor>>>()?;
            detect_all(&ck.model, &imgs, opts.threshold, 8)?
                .into_iter()
                .map(|d| d.lanes.into_iter().map(|l| l.lane).collect())
                .collect()
        }
    };
    let categories: Vec<String> = samples.iter().map(|s| s.category.to_string()).collect();
    let ev = evaluate_lanes(&preds, &gts, Some(&categories), &image, &opts.metrics)?;
    fs::create_dir_all(opts.out)?;
    fs::write(opts.out.join(REPORT_FILE), ev.report.to_jsonl()?)?;

    let ts_path = opts.data.join(TUSIMPLE_FILE);
    let tusimple = if ts_path.exists() {
        let records = read_tusimple(&ts_path)?;
        if records.len() != preds.len() {
            return Err(Error::Format(format!(
                "{} has {} records for {} images",
                ts_path.display(),
                records.len(),
                preds.len()
            )));
        }
        let gts: Vec<SampledLanes> = records.iter().map(|r| r.sampled()).collect();
        let ps: Vec<SampledLanes> = preds
            .iter()
            .zip(&records)
            .map(|(p, r)| SampledLanes::from_polylines(p, &r.h_samples))
            .collect();
        let tol = TUSIMPLE_TOLERANCE_PX * image.width as f64 / TUSIMPLE_WIDTH;
        let rep = tusimple_score(&ps, &gts, tol, TUSIMPLE_LANE_ACCURACY)?;
        fs::write(opts.out.join(TUSIMPLE_REPORT), serde_json::to_string_pretty(&rep)?)?;
        Some(rep)
    } else {
        None
    };
    Ok(EvalOutcome {
        report: ev.report,
        tusimple,
    })
}

/// Draws detections onto `img`, which may be any size; lanes are mapped from
/// model pixels. Zero detections leave the image untouched apart from the
/// count label.
pub fn render_overlay(img: &image::RgbImage, det: &ImageDetections, model_image: &ImageSpec, grid_p: &GridSpec) -> image::RgbImage {
    let mut out = img.clone();
    let sx = img.width() as f64 / model_image.width as f64;
    let sy = img.height() as f64 / model_image.height as f64;
    let width = (img.width() as f64 / 200.0).max(2.0);
    for (k, d) in det.lanes.iter().enumerate() {
        viz::draw_polyline(&mut out, &d.lane.scaled(sx, sy), width, viz::palette_color(k));
    }
    for p in &det.peaks {
        let x = (p.x as f64 + 0.5) * grid_p.cell_width() * sx;
        let y = (p.y as f64 + 0.5) * grid_p.cell_height() * sy;
        viz::draw_marker(&mut out, x, y, (width * 2.0) as i64, image::Rgb([255, 255, 255]));
    }
    let scale = (img.width() as i64 / 160).max(1);
    viz::draw_label(&mut out, &viz::lane_count_label(det.lanes.len()), 2, 2, scale);
    out
}

/// Per-image result of `infer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRecord {
    pub input: String,
    pub output: String,
    pub lanes: Vec<Vec<(f64, f64)>>,
    pub scores: Vec<f64>,
}

/// Detects lanes on each input image and writes `<stem>.png` overlays plus
/// `detections.jsonl` into `out`. Unreadable inputs are skipped with a
/// warning; it is an error only when every input fails.
pub fn cmd_infer(checkpoint: &Path, inputs: &[PathBuf], out: &Path, threshold: f64) -> Result<Vec<InferRecord>> {
    let ck = load_checkpoint(checkpoint, &Device::Cpu)?;
    let cfg = ck.manifest.model.clone();
    let grid_p = cfg.proposal_grid()?;
    fs::create_dir_all(out)?;
    let dtype = ck.model_dtype();
    let mut records = Vec::new();
    let mut failures = 0;
    for (k, input) in inputs.iter().enumerate() {
        match infer_one(&ck.model, input, out, k, threshold, dtype, &cfg.image, &grid_p) {
            Ok(r) => records.push(r),
            Err(e) => {
                failures += 1;
                log::warn!("skipping {}: {e}", input.display());
            }
        }
    }
    if !inputs.is_empty() && failures == inputs.len() {
        return Err(Error::Refused(format!("all {failures} input images failed")));
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(out.join("detections.jsonl"), text)?;
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn infer_one(
    model: &LaneDetector,
    input: &Path,
    out: &Path,
    index: usize,
    threshold: f64,
    dtype: DType,
    model_image: &ImageSpec,
    grid_p: &GridSpec,
) -> Result<InferRecord> {
    let original = image::open(input)?.to_rgb8();
    let resized = image::imageops::resize(
        &original,
        model_image.width as u32,
        model_image.height as u32,
        image::imageops::FilterType::Triangle,
    );
    let arr = crate::data::rgb_to_array(&resized);
    let t = images_to_tensor(&[&arr], dtype, &Device::Cpu)?;
    let det = model.detect(&t, threshold)?.remove(0);
    let overlay = render_overlay(&original, &det, model_image, grid_p);
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("image_{index}"));
    let name = format!("{index:04}_{stem}.png");
    overlay.save(out.join(&name))?;
    Ok(InferRecord {
        input: input.display().to_string(),
        output: name,
        lanes: det
            .lanes
            .iter()
            .map(|d| d.lane.points().iter().map(|p| (p.x, p.y)).collect())
            .collect(),
        scores: det.lanes.iter().map(|d| d.score).collect(),
    })
}
