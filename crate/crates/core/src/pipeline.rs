//! File-level commands behind the command-line tool: each reads its inputs
//! from disk, runs one stage and writes that stage's artifacts.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_gravity_points, LesionAnnotation};
use crate::checkpoint::{self, SaveArgs};
use crate::config::{DataSettings, TrainConfig};
use crate::data::{generate_synthetic, load_dataset, load_sample, split_twofold, DatasetManifest, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_compare, froc_curve, partial_aufc, write_froc, BootstrapResult, FrocCurve, MatchedImage};
use crate::inference::{write_detections, read_detections, Detection, DetectionRecord, InferenceConfig};
use crate::model::optim::Adam;
use crate::model::Model;
use crate::plot;
use crate::train::{common_size, detect, train, RunReport, Timing};

pub const FROC_CSV: &str = "froc.csv";
pub const FROC_PLOT: &str = "froc.png";
pub const METRICS_FILE: &str = "metrics.json";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_TEXT: &str = "comparison.txt";
pub const AVERAGED_CSV: &str = "averaged_froc.csv";
pub const AVERAGED_PLOT: &str = "averaged_froc.png";

/// Which images of the two-fold split a command works on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    Train,
    Validation,
    #[default]
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "train" => Ok(Self::Train),
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown subset {other:?} (all, train, validation, test)"
            ))),
        }
    }
}

/// Manifest indices of `subset` under the split settings in `config`, in
/// manifest order.
pub fn select_indices(manifest: &DatasetManifest, config: &TrainConfig, subset: Subset) -> Result<Vec<usize>> {
    let n = manifest.entries.len();
    if subset == Subset::All {
        return Ok((0..n).collect());
    }
    let healthy: Vec<bool> = manifest.entries.iter().map(|e| e.lesions.is_empty()).collect();
    let split = split_twofold(
        n,
        config.validation_fraction,
        config.seed,
        config.stratify.then_some(healthy.as_slice()),
    )?;
    let fold = split.fold(config.fold);
    let mut picked = match subset {
        Subset::Train => fold.train,
        Subset::Validation => fold.validation,
        _ => fold.test,
    };
    picked.sort_unstable();
    Ok(picked)
}

pub fn read_manifest(dir: &Path, data: &DataSettings) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::read(dir)?;
    manifest.channel_rule = data.channel_rule;
    manifest.target_size = data.target_size;
    manifest.resize_mode = data.resize_mode;
    Ok(manifest)
}

/// Reads a synthetic spec from JSON, or from TOML when the extension says so.
/// Missing keys take their defaults.
pub fn read_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest = generate_synthetic(spec, out_dir)?;
    log::info!("wrote {} images to {}", manifest.entries.len(), out_dir.display());
    Ok(manifest)
}

pub fn cmd_train(config: &TrainConfig, dataset_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let manifest = read_manifest(dataset_dir, &config.data)?;
    let samples = load_dataset(&manifest)?;
    train(&samples, config)
}

/// Writes a randomly initialized checkpoint, the reference point for
/// comparisons against an untrained model.
pub fn cmd_init(config: &TrainConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    let manifest = read_manifest(dataset_dir, &config.data)?;
    let first = manifest
        .entries
        .first()
        .ok_or_else(|| Error::InvalidInput("the dataset has no images".into()))?;
    let sample = load_sample(first, &manifest)?;
    let grid = config.grid.grid_for(sample.image.height, sample.image.width);
    let model = Model::build_for_grid(&config.model.model_config(&grid)?, &grid, config.seed)?;
    let args = SaveArgs {
        config,
        grid: &grid,
        epoch: 0,
        best_metric: 0.0,
        lr: config.initial_lr,
    };
    checkpoint::save(out, &model, &Adam::new(config.initial_lr), args)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub images: usize,
    pub detections: usize,
    pub timing: Timing,
}

pub struct TestOptions {
    pub subset: Subset,
    /// Replaces the inference settings stored in the checkpoint.
    pub inference: Option<InferenceConfig>,
}

pub fn cmd_test(checkpoint_path: &Path, dataset_dir: &Path, options: &TestOptions, out: &Path) -> Result<TestSummary> {
    let ck = checkpoint::load(checkpoint_path)?;
    let config = &ck.header.config;
    let inference = options.inference.clone().unwrap_or_else(|| config.inference.clone());
    inference.validate()?;
    let manifest = read_manifest(dataset_dir, &config.data)?;
    let indices = select_indices(&manifest, config, options.subset)?;
    let samples: Vec<Sample> = indices
        .iter()
        .map(|&i| load_sample(&manifest.entries[i], &manifest))
        .collect::<Result<_>>()?;
    let grid = &ck.header.grid;
    if !samples.is_empty() {
        let (h, w) = common_size(&samples)?;
        if (h, w) != (grid.image_height, grid.image_width) {
            return Err(Error::ConfigurationMismatch(format!(
                "checkpoint expects {}x{} images, the dataset has {h}x{w}",
                grid.image_height, grid.image_width
            )));
        }
    }
    let points = generate_gravity_points(grid)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let start = Instant::now();
    let detections = detect(&ck.model, &refs, &points, &inference, config.batch_size)?;
    let timing = Timing::inference(samples.len(), start.elapsed().as_secs_f64());

    let records: Vec<DetectionRecord> = samples
        .iter()
        .zip(&detections)
        .flat_map(|(s, dets)| {
            dets.iter().map(|d| DetectionRecord {
                image_id: s.image_id.clone(),
                x: d.position.x,
                y: d.position.y,
                score: d.score,
            })
        })
        .collect();
    write_detections(out, &records)?;
    Ok(TestSummary {
        images: samples.len(),
        detections: records.len(),
        timing,
    })
}

/// Ground truth of the evaluated images, in the frame the detector saw: when
/// images are resized or cropped the annotations move with them.
fn evaluation_truth(dataset_dir: &Path, config: &TrainConfig, subset: Subset) -> Result<Vec<(String, Vec<LesionAnnotation>)>> {
    let manifest = read_manifest(dataset_dir, &config.data)?;
    let indices = select_indices(&manifest, config, subset)?;
    indices
        .iter()
        .map(|&i| {
            let entry = &manifest.entries[i];
            if manifest.target_size.is_none() {
                Ok((entry.image_id.clone(), entry.lesions.clone()))
            } else {
                load_sample(entry, &manifest).map(|s| (s.image_id, s.lesions))
            }
        })
        .collect()
}

/// Matches detection records against the evaluated images. Records naming an
/// image outside that set are an error; with `unhealthy_only`, images without
/// lesions are dropped after that check.
pub fn matched_images(
    records: &[DetectionRecord],
    truth: &[(String, Vec<LesionAnnotation>)],
    unhealthy_only: bool,
) -> Result<Vec<MatchedImage>> {
    let ids: HashSet<&str> = truth.iter().map(|(id, _)| id.as_str()).collect();
    let mut per_image: HashMap<&str, Vec<Detection>> = HashMap::new();
    for r in records {
        if !ids.contains(r.image_id.as_str()) {
            return Err(Error::InvalidComparison(format!(
                "detections reference image {} which is not among the evaluated images",
                r.image_id
            )));
        }
        per_image
            .entry(r.image_id.as_str())
            .or_default()
            .push(Detection::new(r.x, r.y, r.score, 0));
    }
    Ok(truth
        .iter()
        .filter(|(_, lesions)| !unhealthy_only || !lesions.is_empty())
        .map(|(id, lesions)| {
            let dets = per_image.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            MatchedImage::new(id.clone(), dets, lesions)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub lesions: usize,
    pub detections: usize,
    pub fppi_limit: f64,
    pub aufc: f64,
}

pub fn cmd_eval(
    detections: &Path,
    dataset_dir: &Path,
    config: &TrainConfig,
    subset: Subset,
    out_dir: &Path,
) -> Result<(EvalSummary, FrocCurve)> {
    config.eval.validate()?;
    let records = read_detections(detections)?;
    let truth = evaluation_truth(dataset_dir, config, subset)?;
    let images = matched_images(&records, &truth, config.eval.unhealthy_only)?;
    let curve = froc_curve(&images)?;
    let limit = config.eval.fppi_limit;
    let summary = EvalSummary {
        images: images.len(),
        lesions: images.iter().map(|i| i.lesion_count).sum(),
        detections: images.iter().map(|i| i.outcomes.len()).sum(),
        fppi_limit: limit,
        aufc: partial_aufc(&curve, limit),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_froc(&out_dir.join(FROC_CSV), &curve)?;
    plot::plot_froc(&out_dir.join(FROC_PLOT), &curve, limit)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&metrics_path, json).map_err(|e| Error::io(&metrics_path, e))?;
    Ok((summary, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub detections_a: PathBuf,
    pub detections_b: PathBuf,
    pub images: usize,
    pub lesions: usize,
    pub fppi_limit: f64,
    pub alpha: f64,
    pub significant: bool,
    pub result: BootstrapResult,
}

impl ComparisonReport {
    pub fn verdict(&self) -> &'static str {
        if self.significant {
            "significant"
        } else {
            "not significant"
        }
    }

    pub fn to_text(&self) -> String {
        let r = &self.result;
        let g = self.fppi_limit;
        let mut out = String::new();
        writeln!(out, "images: {} ({} lesions)", self.images, self.lesions).unwrap();
        writeln!(out, "A {}: AUFC@{g} = {:.6}", self.detections_a.display(), r.aufc_a).unwrap();
        writeln!(out, "B {}: AUFC@{g} = {:.6}", self.detections_b.display(), r.aufc_b).unwrap();
        writeln!(out, "mean bootstrap delta (A - B): {:.6}", r.delta_mean).unwrap();
        writeln!(out, "p-value: {:.6}", r.p_value).unwrap();
        writeln!(out, "verdict at alpha {}: {}", self.alpha, self.verdict()).unwrap();
        writeln!(out, "iterations: {}, seed: {}", r.iterations, r.seed).unwrap();
        out
    }
}

fn write_averaged(path: &Path, result: &BootstrapResult) -> Result<()> {
    let (a, b) = (&result.curve_a, &result.curve_b);
    let mut out = String::from("fppi,mean_a,lower_a,upper_a,mean_b,lower_b,upper_b\n");
    for i in 0..a.fppi.len() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a.fppi[i], a.mean[i], a.lower[i], a.upper[i], b.mean[i], b.lower[i], b.upper[i]
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Bootstrap comparison of two detection files over the same images; `a` is
/// the candidate expected to be better.
pub fn cmd_compare(
    detections_a: &Path,
    detections_b: &Path,
    dataset_dir: &Path,
    config: &TrainConfig,
    subset: Subset,
    out_dir: &Path,
) -> Result<ComparisonReport> {
    config.eval.validate()?;
    let truth = evaluation_truth(dataset_dir, config, subset)?;
    let unhealthy = config.eval.unhealthy_only;
    let a = matched_images(&read_detections(detections_a)?, &truth, unhealthy)?;
    let b = matched_images(&read_detections(detections_b)?, &truth, unhealthy)?;
    let result = bootstrap_compare(&a, &b, &config.eval)?;
    let alpha = config.eval.significance_level;
    let report = ComparisonReport {
        detections_a: detections_a.into(),
        detections_b: detections_b.into(),
        images: a.len(),
        lesions: a.iter().map(|i| i.lesion_count).sum(),
        fppi_limit: config.eval.fppi_limit,
        alpha,
        significant: result.significant(alpha),
        result,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join(COMPARISON_JSON);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let text_path = out_dir.join(COMPARISON_TEXT);
    std::fs::write(&text_path, report.to_text()).map_err(|e| Error::io(&text_path, e))?;
    write_averaged(&out_dir.join(AVERAGED_CSV), &report.result)?;
    plot::plot_averaged(
        &out_dir.join(AVERAGED_PLOT),
        &[&report.result.curve_a, &report.result.curve_b],
        config.eval.fppi_limit,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> Vec<(String, Vec<LesionAnnotation>)> {
        vec![
            ("a".into(), vec![LesionAnnotation::new(10.0, 10.0, 4.0, 4.0)]),
            ("b".into(), vec![]),
        ]
    }

    fn record(id: &str, x: f64, score: f64) -> DetectionRecord {
        DetectionRecord {
            image_id: id.into(),
            x,
            y: 10.0,
            score,
        }
    }

    #[test]
    fn matching_keeps_images_without_detections() {
        let m = matched_images(&[record("a", 10.0, 0.9)], &truth(), false).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].outcomes, vec![(0.9, true)]);
        assert!(m[1].outcomes.is_empty());
    }

    #[test]
    fn unknown_ids_are_rejected_even_when_filtered() {
        let err = matched_images(&[record("zzz", 1.0, 0.5)], &truth(), true).unwrap_err();
        assert!(matches!(err, Error::InvalidComparison(_)));
        let m = matched_images(&[record("b", 1.0, 0.5)], &truth(), true).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].image_id, "a");
    }

    #[test]
    fn subsets_partition_the_manifest() {
        let spec = SyntheticSpec {
            image_count: 12,
            image_size: (64, 64),
            lesions_per_image: (1, 2),
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = cmd_synth(&spec, dir.path()).unwrap();
        let config = TrainConfig::default();
        let pick = |s| select_indices(&manifest, &config, s).unwrap();
        let (train, val, test) = (pick(Subset::Train), pick(Subset::Validation), pick(Subset::Test));
        assert_eq!(train.len() + val.len() + test.len(), 12);
        let all: HashSet<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        assert_eq!(all.len(), 12);
        assert_eq!(pick(Subset::All), (0..12).collect::<Vec<_>>());
    }
}
