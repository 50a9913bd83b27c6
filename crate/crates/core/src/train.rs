//! Training loop, batched inference and timing.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_gravity_points, hook_gravity_points, hooking_coverage, GravityPointSet, GridConfig, HookingAssignment};
use crate::checkpoint::{self, SaveArgs};
use crate::config::{PlateauScheduler, TrainConfig};
use crate::data::{augment_dataset, shift_sample, split_twofold, FoldAssignment, Sample};
use crate::error::{Error, Result};
use crate::eval::{froc_curve, partial_aufc, MatchedImage};
use crate::inference::{postprocess, Detection, InferenceConfig};
use crate::loss::{classification_loss_logits, regression_loss_with_grad, GravityLoss, LossConfig};
use crate::model::nn::Tensor;
use crate::model::optim::Adam;
use crate::model::{HeadOutputs, Model};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

/// Stacks same-sized single-channel images into an `(N, 1, H, W)` batch.
pub fn batch_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInputShape("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::InvalidInputShape(format!(
                "image {} is {}x{}, the batch is {w}x{h}",
                s.image_id, s.image.width, s.image.height
            )));
        }
        data.extend_from_slice(&s.image.data);
    }
    Ok(Tensor::from_vec(samples.len(), 1, h, w, data))
}

/// Loss of a batch and its gradient with respect to the head outputs.
///
/// Anchors of all images are pooled, so both terms are normalized by the
/// batch's total positive count. The reported loss is the focal term on the
/// lesion channel plus the weighted regression term. The background channel
/// is trained with the same focal term applied to one minus its sigmoid; it
/// contributes to the gradient only.
pub fn batch_loss(
    heads: &HeadOutputs,
    points: &GravityPointSet,
    assignments: &[&HookingAssignment],
    config: &LossConfig,
) -> Result<(GravityLoss, HeadOutputs)> {
    let per_image = points.len();
    let n = assignments.len();
    let mut lesion = Vec::with_capacity(n * per_image);
    let mut neg_background = Vec::with_capacity(n * per_image);
    let mut offsets = Vec::with_capacity(n * per_image);
    for i in 0..n {
        let g = heads.gather(i, points);
        lesion.extend(g.lesion_logits);
        neg_background.extend(g.background_logits.iter().map(|z| -z));
        offsets.extend(g.offsets);
    }
    let joined = HookingAssignment::concat(assignments.iter().copied());
    let (cls, d_lesion) = classification_loss_logits(&lesion, &joined.positive, config)?;
    let (_, d_neg_bg) = classification_loss_logits(&neg_background, &joined.positive, config)?;
    let (reg, d_offsets) = regression_loss_with_grad(&offsets, &joined.target_offset, &joined.positive)?;
    let d_background: Vec<f64> = d_neg_bg.iter().map(|g| -g).collect();
    let d_offsets: Vec<[f64; 2]> = d_offsets
        .iter()
        .map(|g| [g[0] * config.lambda, g[1] * config.lambda])
        .collect();
    let mut grad = heads.zeros_like();
    for i in 0..n {
        let r = i * per_image..(i + 1) * per_image;
        HeadOutputs::scatter_grad(
            &mut grad,
            i,
            points,
            &d_lesion[r.clone()],
            &d_background[r.clone()],
            &d_offsets[r],
        );
    }
    Ok((GravityLoss::combine(cls, reg, config.lambda), grad))
}

/// Detections for every sample, in input order.
pub fn detect(
    model: &Model,
    samples: &[&Sample],
    points: &GravityPointSet,
    config: &InferenceConfig,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let preds = model.forward(&batch_tensor(chunk)?, points)?;
        for (s, p) in chunk.iter().zip(&preds) {
            out.push(postprocess(points, p, &s.mask, s.image.width, s.image.height, config)?);
        }
    }
    Ok(out)
}

/// Partial AUFC of detections against the samples' lesions; zero when the
/// samples contain no lesions at all.
pub fn aufc_of(samples: &[&Sample], detections: &[Vec<Detection>], fppi_limit: f64) -> f64 {
    let matched: Vec<MatchedImage> = samples
        .iter()
        .zip(detections)
        .map(|(s, d)| MatchedImage::new(s.image_id.clone(), d, &s.lesions))
        .collect();
    match froc_curve(&matched) {
        Ok(curve) => partial_aufc(&curve, fppi_limit),
        Err(_) => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: GravityLoss,
    pub val_loss: GravityLoss,
    pub val_aufc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Mean wall time of one training epoch, seconds.
    pub time_per_epoch: f64,
    /// Mean inference time per image, seconds.
    pub time_per_image: f64,
    /// Images per second at inference.
    pub throughput: f64,
}

impl Timing {
    pub fn inference(images: usize, seconds: f64) -> Self {
        let per = if images > 0 { seconds / images as f64 } else { 0.0 };
        Self {
            time_per_epoch: 0.0,
            time_per_image: per,
            throughput: if seconds > 0.0 { images as f64 / seconds } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub lesions: usize,
    /// Lesions no gravity point can hook.
    pub uncovered: usize,
    pub min_coverage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub train_samples: usize,
    pub validation_images: usize,
    pub test_images: usize,
    pub coverage: CoverageSummary,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_aufc: f64,
    pub timing: Timing,
}

/// Per-sample hooking targets, plus how well the grid covers the lesions.
pub fn assign_targets(samples: &[Sample], points: &GravityPointSet, d_h: f64) -> (Vec<HookingAssignment>, CoverageSummary) {
    let mut summary = CoverageSummary {
        min_coverage: usize::MAX,
        ..Default::default()
    };
    let assignments = samples
        .iter()
        .map(|s| {
            for c in hooking_coverage(points, &s.lesions, d_h) {
                summary.lesions += 1;
                summary.uncovered += usize::from(c == 0);
                summary.min_coverage = summary.min_coverage.min(c);
            }
            hook_gravity_points(points, &s.lesions, d_h)
        })
        .collect();
    if summary.lesions == 0 {
        summary.min_coverage = 0;
    }
    (assignments, summary)
}

/// Mean validation loss over batches, inference mode.
fn validation_loss(
    model: &Model,
    samples: &[&Sample],
    assignments: &[HookingAssignment],
    points: &GravityPointSet,
    config: &TrainConfig,
) -> Result<GravityLoss> {
    let mut sum = GravityLoss::default();
    let mut batches = 0;
    for (chunk, targets) in samples.chunks(config.batch_size).zip(assignments.chunks(config.batch_size)) {
        let heads = model.infer_heads(&batch_tensor(chunk)?)?;
        let refs: Vec<&HookingAssignment> = targets.iter().collect();
        let (l, _) = batch_loss(&heads, points, &refs, &config.loss)?;
        sum.total += l.total;
        sum.cls += l.cls;
        sum.reg += l.reg;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(GravityLoss {
        total: sum.total / n,
        cls: sum.cls / n,
        reg: sum.reg / n,
    })
}

/// Checks that all samples share one size and returns it as `(height, width)`.
pub fn common_size(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("the dataset is empty".into()))?;
    let size = (first.image.height, first.image.width);
    if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width) != size) {
        return Err(Error::InvalidInputShape(format!(
            "image {} is {}x{} but {} is {}x{}; set a target size",
            s.image_id, s.image.width, s.image.height, first.image_id, size.1, size.0
        )));
    }
    Ok(size)
}

pub fn fold_assignment(samples: &[Sample], config: &TrainConfig) -> Result<FoldAssignment> {
    let healthy: Vec<bool> = samples.iter().map(Sample::is_healthy).collect();
    let split = split_twofold(
        samples.len(),
        config.validation_fraction,
        config.seed,
        config.stratify.then_some(healthy.as_slice()),
    )?;
    Ok(split.fold(config.fold))
}

/// Trains on the configured fold and writes checkpoints, the resolved config
/// and the run report into `config.checkpoint_dir`.
pub fn train(samples: &[Sample], config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    let (height, width) = common_size(samples)?;
    let grid: GridConfig = config.grid.grid_for(height, width);
    let model_cfg = config.model.model_config(&grid)?;
    let points = generate_gravity_points(&grid)?;
    let mut model = Model::build_for_grid(&model_cfg, &grid, config.seed)?;
    let mut optimizer = Adam::new(config.initial_lr);

    let fold = fold_assignment(samples, config)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let train_set = augment_dataset(&pick(&fold.train));
    let val_set = pick(&fold.validation);
    let (train_targets, coverage) = assign_targets(&train_set, &points, grid.hooking_distance);
    let (val_targets, _) = assign_targets(&val_set, &points, grid.hooking_distance);
    let val_refs: Vec<&Sample> = val_set.iter().collect();

    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    log::info!(
        "training {} samples ({} images x 4), validating on {}, {} gravity points per image",
        train_set.len(),
        fold.train.len(),
        val_set.len(),
        points.len()
    );

    let mut scheduler = PlateauScheduler::new(config.lr_decay_factor, config.lr_patience);
    let mut lr = config.initial_lr;
    let mut report = RunReport {
        config: config.clone(),
        train_samples: train_set.len(),
        validation_images: val_set.len(),
        test_images: fold.test.len(),
        coverage,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_aufc: f64::NEG_INFINITY,
        timing: Timing::default(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut train_seconds = 0.0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        optimizer.lr = lr;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sum = GravityLoss::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let shifted: Vec<Sample>;
            let shifted_targets: Vec<HookingAssignment>;
            let (batch, targets): (Vec<&Sample>, Vec<&HookingAssignment>) = if config.max_shift > 0 {
                let m = config.max_shift as i64;
                shifted = chunk
                    .iter()
                    .map(|&i| shift_sample(&train_set[i], rng.random_range(-m..=m), rng.random_range(-m..=m)))
                    .collect();
                shifted_targets = shifted
                    .iter()
                    .map(|s| hook_gravity_points(&points, &s.lesions, grid.hooking_distance))
                    .collect();
                (shifted.iter().collect(), shifted_targets.iter().collect())
            } else {
                (
                    chunk.iter().map(|&i| &train_set[i]).collect(),
                    chunk.iter().map(|&i| &train_targets[i]).collect(),
                )
            };
            model.zero_grad();
            let heads = model.forward_train(&batch_tensor(&batch)?)?;
            let (loss, grad) = batch_loss(&heads, &points, &targets, &config.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("cls {} reg {}", loss.cls, loss.reg),
                });
            }
            model.backward(grad);
            optimizer.update(&mut model.params_mut(), 1.0);
            sum.total += loss.total;
            sum.cls += loss.cls;
            sum.reg += loss.reg;
            batches += 1;
        }
        let nb = batches as f64;
        let train_loss = GravityLoss {
            total: sum.total / nb,
            cls: sum.cls / nb,
            reg: sum.reg / nb,
        };
        let seconds = start.elapsed().as_secs_f64();
        train_seconds += seconds;

        let val_loss = validation_loss(&model, &val_refs, &val_targets, &points, config)?;
        let detections = detect(&model, &val_refs, &points, &config.inference, config.batch_size)?;
        let val_aufc = aufc_of(&val_refs, &detections, config.eval.fppi_limit);
        log::info!(
            "epoch {epoch}/{}: lr {lr:.1e} train {:.5} val {:.5} val AUFC {:.4} ({seconds:.1}s)",
            config.epochs,
            train_loss.total,
            val_loss.total,
            val_aufc
        );
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_aufc,
            seconds,
        });
        if val_aufc > report.best_val_aufc {
            report.best_val_aufc = val_aufc;
            report.best_epoch = epoch;
            let args = SaveArgs {
                config,
                grid: &grid,
                epoch,
                best_metric: val_aufc,
                lr,
            };
            checkpoint::save(&dir.join(BEST_CHECKPOINT), &model, &optimizer, args)?;
        }
        lr = scheduler.step(val_loss.total, lr);
    }
    let args = SaveArgs {
        config,
        grid: &grid,
        epoch: config.epochs,
        best_metric: report.best_val_aufc,
        lr,
    };
    checkpoint::save(&dir.join(LAST_CHECKPOINT), &model, &optimizer, args)?;

    let start = Instant::now();
    detect(&model, &val_refs, &points, &config.inference, config.batch_size)?;
    let mut timing = Timing::inference(val_refs.len(), start.elapsed().as_secs_f64());
    timing.time_per_epoch = train_seconds / config.epochs as f64;
    report.timing = timing;
    write_report(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
