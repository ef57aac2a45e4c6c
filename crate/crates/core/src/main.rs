use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use condlane::backbone::Variant;
use condlane::cli::{cmd_eval, cmd_gen_data, cmd_infer, cmd_train, EvalOptions, TrainOptions};
use condlane::geometry::ImageSpec;
use condlane::pipeline::{ModelConfig, RunConfig};

#[derive(Parser)]
#[command(name = "condlane", version, about = "Lane detection with conditional row-wise shape heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default run configuration (TOML) to stdout.
    InitConfig {
        #[arg(long, value_enum, default_value = "small")]
        variant: VariantArg,
        #[arg(long, default_value_t = 320)]
        height: usize,
        #[arg(long, default_value_t = 800)]
        width: usize,
        /// Reduced widths and depths for CPU experiments.
        #[arg(long)]
        compact: bool,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint manifest (`.json`).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset (mask-IoU F1, plus TuSimple metrics when labels exist).
    Eval {
        /// Checkpoint manifest; omit together with --labels-as-predictions.
        #[arg(long, required_unless_present = "labels_as_predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration providing the threshold and metric settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Score the dataset labels against themselves.
        #[arg(long)]
        labels_as_predictions: bool,
    },
    /// Draw detections over images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Small,
    Medium,
    Large,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Small => Variant::Small,
            VariantArg::Medium => Variant::Medium,
            VariantArg::Large => Variant::Large,
        }
    }
}

fn run(cli: Cli) -> condlane::Result<()> {
    match cli.command {
        Command::InitConfig {
            variant,
            height,
            width,
            compact,
        } => {
            let image = ImageSpec::new(height, width)?;
            let model = if compact {
                ModelConfig::compact(variant.into(), image)
            } else {
                ModelConfig::for_variant(variant.into(), image)
            };
            let cfg = RunConfig::new(model);
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
        }
        Command::GenData {
            config,
            out,
            count,
            force,
        } => {
            let cfg = RunConfig::load(&config)?;
            let m = cmd_gen_data(&cfg, &out, count, force)?;
            println!("{} samples, digest {}", m.entries.len(), m.digest()?);
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            force,
        } => {
            let cfg = RunConfig::load(&config)?;
            let m = cmd_train(
                &cfg,
                &TrainOptions {
                    data: &data,
                    out: &out,
                    resume: resume.as_deref(),
                    force,
                },
            )?;
            if let Some(last) = m.checkpoints.last() {
                println!("final checkpoint {}", out.join(last).display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            threshold,
            labels_as_predictions,
        } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            let metrics = cfg.as_ref().map(|c| c.metrics).unwrap_or_default();
            let threshold = threshold
                .or(cfg.as_ref().map(|c| c.infer.threshold))
                .unwrap_or(0.3);
            let outcome = cmd_eval(&EvalOptions {
                checkpoint: if labels_as_predictions { None } else { checkpoint.as_deref() },
                data: &data,
                out: &out,
                threshold,
                metrics,
            })?;
            print!("{}", outcome.report.to_jsonl()?);
            if let Some(t) = outcome.tusimple {
                println!("{}", serde_json::to_string(&t)?);
            }
        }
        Command::Infer {
            checkpoint,
            out,
            threshold,
            images,
        } => {
            let records = cmd_infer(&checkpoint, &images, &out, threshold)?;
            for r in records {
                println!("{} -> {} ({} lanes)", r.input, r.output, r.lanes.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
