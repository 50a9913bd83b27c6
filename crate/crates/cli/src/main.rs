use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gravitynet::checkpoint;
use gravitynet::config::{Profile, TrainConfig};
use gravitynet::data::SyntheticSpec;
use gravitynet::model::BackboneKind;
use gravitynet::pipeline::{self, Subset, TestOptions};

/// Gravity-point detector for small lesions: synthetic data, training,
/// inference, FROC evaluation and bootstrap comparison.
#[derive(Parser)]
#[command(name = "gravitynet", version)]
struct Cli {
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, env = "GRAVITYNET_DEVICE", default_value = "cpu")]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// JSON or TOML spec; defaults are used for missing keys or without a file.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one fold and write checkpoints plus a run report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write an untrained checkpoint with the given configuration.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a checkpoint over a subset and write a detections file.
    Test {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        subset: Subset,
        /// Use this profile's inference settings instead of the checkpoint's.
        #[arg(long)]
        profile: Option<Profile>,
        /// NMS box side L in pixels.
        #[arg(long)]
        box_side: Option<f64>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long)]
        score_threshold: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Compute the FROC curve and partial AUFC of a detections file.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        subset: Subset,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Bootstrap comparison of two detections files on the same images.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        subset: Subset,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Config file plus flag overrides; flags win over the file, the file over
/// the profile.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "mc")]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    hooking_distance: Option<f64>,
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    box_side: Option<f64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    fppi_limit: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluate only images that contain lesions.
    #[arg(long)]
    unhealthy_only: bool,
    /// Keep the healthy/unhealthy ratio across folds and validation subsets.
    #[arg(long)]
    stratify: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
                TrainConfig::from_toml(&text)?
            }
            None => TrainConfig::for_profile(self.profile),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.epochs, cfg.epochs);
        set!(self.batch_size, cfg.batch_size);
        set!(self.lr, cfg.initial_lr);
        set!(self.seed, cfg.seed);
        set!(self.fold, cfg.fold);
        set!(self.step, cfg.grid.step);
        set!(self.hooking_distance, cfg.grid.hooking_distance);
        set!(self.backbone, cfg.model.backbone_kind);
        set!(self.box_side, cfg.inference.box_side);
        set!(self.checkpoint_dir, cfg.checkpoint_dir);
        set!(self.fppi_limit, cfg.eval.fppi_limit);
        set!(self.iterations, cfg.eval.bootstrap_iterations);
        set!(self.bootstrap_seed, cfg.eval.rng_seed);
        set!(self.alpha, cfg.eval.significance_level);
        cfg.eval.unhealthy_only |= self.unhealthy_only;
        cfg.stratify |= self.stratify;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn inference_override(
    checkpoint_path: &Path,
    profile: Option<Profile>,
    box_side: Option<f64>,
    iou_threshold: Option<f64>,
    score_threshold: Option<f64>,
    top_k: Option<usize>,
) -> anyhow::Result<Option<gravitynet::inference::InferenceConfig>> {
    if profile.is_none() && box_side.is_none() && iou_threshold.is_none() && score_threshold.is_none() && top_k.is_none() {
        return Ok(None);
    }
    let mut inference = match profile {
        Some(p) => TrainConfig::for_profile(p).inference,
        None => checkpoint::read_header(checkpoint_path)?.config.inference,
    };
    inference.box_side = box_side.unwrap_or(inference.box_side);
    inference.iou_threshold = iou_threshold.unwrap_or(inference.iou_threshold);
    inference.score_threshold = score_threshold.unwrap_or(inference.score_threshold);
    inference.prefilter_top_k = top_k.unwrap_or(inference.prefilter_top_k);
    Ok(Some(inference))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.device != "cpu" {
        return Err(gravitynet::Error::InvalidConfig(format!(
            "device {:?} is not available; only cpu is supported",
            cli.device
        ))
        .into());
    }
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(path) => pipeline::read_synthetic_spec(&path)?,
                None => SyntheticSpec::default(),
            };
            let manifest = pipeline::cmd_synth(&spec, &out)?;
            let lesions: usize = manifest.entries.iter().map(|e| e.lesions.len()).sum();
            println!(
                "{}: {} images, {} lesions, index {}",
                out.display(),
                manifest.entries.len(),
                lesions,
                out.join(gravitynet::data::INDEX_FILE).display()
            );
        }
        Command::Train { data, config } => {
            let cfg = config.resolve()?;
            let report = pipeline::cmd_train(&cfg, &data)?;
            println!(
                "best epoch {} with validation AUFC {:.4}; time per epoch {:.2}s, time per image {:.4}s, throughput {:.1} images/s",
                report.best_epoch,
                report.best_val_aufc,
                report.timing.time_per_epoch,
                report.timing.time_per_image,
                report.timing.throughput
            );
            println!("checkpoints in {}", cfg.checkpoint_dir.display());
        }
        Command::Init { data, out, config } => {
            let cfg = config.resolve()?;
            pipeline::cmd_init(&cfg, &data, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Test {
            checkpoint,
            data,
            out,
            subset,
            profile,
            box_side,
            iou_threshold,
            score_threshold,
            top_k,
        } => {
            let inference = inference_override(&checkpoint, profile, box_side, iou_threshold, score_threshold, top_k)?;
            let options = TestOptions { subset, inference };
            let summary = pipeline::cmd_test(&checkpoint, &data, &options, &out)?;
            println!(
                "{} detections on {} images; time per image {:.4}s, throughput {:.1} images/s",
                summary.detections, summary.images, summary.timing.time_per_image, summary.timing.throughput
            );
        }
        Command::Eval {
            detections,
            data,
            out,
            subset,
            config,
        } => {
            let cfg = config.resolve()?;
            let (summary, _) = pipeline::cmd_eval(&detections, &data, &cfg, subset, &out)?;
            println!(
                "AUFC@{} = {:.6} over {} images ({} lesions, {} detections)",
                summary.fppi_limit, summary.aufc, summary.images, summary.lesions, summary.detections
            );
        }
        Command::Compare {
            a,
            b,
            data,
            out,
            subset,
            config,
        } => {
            let cfg = config.resolve()?;
            let report = pipeline::cmd_compare(&a, &b, &data, &cfg, subset, &out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = match err.downcast_ref::<gravitynet::Error>() {
                Some(e) => {
                    eprintln!("error [{}]: {e}", e.category());
                    e.exit_code()
                }
                None => {
                    eprintln!("error: {err:#}");
                    1
                }
            };
            ExitCode::from(code as u8)
        }
    }
}
