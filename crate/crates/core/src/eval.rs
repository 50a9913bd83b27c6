//! Lesion-level FROC analysis.
//!
//! Detections are matched per image in descending score order; each one claims
//! the nearest still-unclaimed lesion whose center lies within the lesion's
//! largest bounding-box side. Everything else, duplicates included, is a false
//! positive. Curves sweep a strict `score > threshold` cut over every distinct
//! score.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::LesionAnnotation;
use crate::error::{Error, Result};
use crate::inference::{score_order, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fppi_limit: f64,
    pub bootstrap_iterations: usize,
    pub significance_level: f64,
    pub rng_seed: u64,
    /// Average false positives over lesion-bearing images only.
    pub unhealthy_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fppi_limit: 10.0,
            bootstrap_iterations: 1000,
            significance_level: 0.05,
            rng_seed: 0,
            unhealthy_only: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fppi_limit > 0.0 && self.fppi_limit.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fppi_limit must be positive, got {}",
                self.fppi_limit
            )));
        }
        if self.bootstrap_iterations == 0 {
            return Err(Error::InvalidConfig("bootstrap_iterations must be positive".into()));
        }
        if !(self.significance_level > 0.0 && self.significance_level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "significance_level must lie in (0, 1), got {}",
                self.significance_level
            )));
        }
        Ok(())
    }
}

/// Matching outcome for one image, in the order the detections were given.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub is_tp: Vec<bool>,
    pub lesion_hit: Vec<bool>,
}

pub fn match_detections(detections: &[Detection], lesions: &[LesionAnnotation]) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| score_order(&detections[a], &detections[b]).then(a.cmp(&b)));
    let mut is_tp = vec![false; detections.len()];
    let mut lesion_hit = vec![false; lesions.len()];
    for i in order {
        let pos = &detections[i].position;
        let mut best: Option<(usize, f64)> = None;
        for (l, lesion) in lesions.iter().enumerate() {
            if lesion_hit[l] {
                continue;
            }
            let d = pos.distance(&lesion.center);
            if d <= lesion.largest_side() && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((l, d));
            }
        }
        if let Some((l, _)) = best {
            lesion_hit[l] = true;
            is_tp[i] = true;
        }
    }
    MatchResult { is_tp, lesion_hit }
}

/// Matched detections of one image, reduced to what curve building needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedImage {
    pub image_id: String,
    pub lesion_count: usize,
    /// `(score, is_tp)` pairs.
    pub outcomes: Vec<(f64, bool)>,
}

impl MatchedImage {
    pub fn new(image_id: impl Into<String>, detections: &[Detection], lesions: &[LesionAnnotation]) -> Self {
        let m = match_detections(detections, lesions);
        Self {
            image_id: image_id.into(),
            lesion_count: lesions.len(),
            outcomes: detections.iter().map(|d| d.score).zip(m.is_tp).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fppi: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FrocCurve {
    /// Ascending in fppi; the first point is the empty detection set.
    pub points: Vec<OperatingPoint>,
}

/// Score-sorted outcomes with per-image weights, the common input of plain and
/// resampled curves.
struct Pooled {
    /// `(score, is_tp, image)` in descending score.
    entries: Vec<(f64, bool, usize)>,
}

impl Pooled {
    fn new(images: &[MatchedImage]) -> Self {
        let mut entries: Vec<(f64, bool, usize)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, img)| img.outcomes.iter().map(move |&(s, tp)| (s, tp, i)))
            .collect();
        entries.sort_by(|a, b| b.0.total_cmp(&a.0));
        Self { entries }
    }

    /// Walks the threshold sweep. Stops after the first point at or beyond
    /// `stop_fppi`, which is all the partial area and grid sampling need.
    fn curve(&self, weights: &[f64], total_lesions: f64, image_count: f64, stop_fppi: f64) -> FrocCurve {
        let rate = |count: f64, denom: f64| if denom > 0.0 { count / denom } else { 0.0 };
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut k = 0;
        while k < self.entries.len() {
            let s = self.entries[k].0;
            let p = OperatingPoint {
                threshold: s,
                fppi: rate(fp, image_count),
                tpr: rate(tp, total_lesions),
            };
            points.push(p);
            if p.fppi >= stop_fppi {
                return FrocCurve { points };
            }
            while k < self.entries.len() && self.entries[k].0 == s {
                let (_, is_tp, img) = self.entries[k];
                if is_tp {
                    tp += weights[img];
                } else {
                    fp += weights[img];
                }
                k += 1;
            }
        }
        // Final cut at zero counts every detection above it; skipped when the
        // lowest score already is zero.
        if self.entries.last().is_none_or(|e| e.0 > 0.0) {
            points.push(OperatingPoint {
                threshold: 0.0,
                fppi: rate(fp, image_count),
                tpr: rate(tp, total_lesions),
            });
        }
        FrocCurve { points }
    }
}

pub fn froc_curve(images: &[MatchedImage]) -> Result<FrocCurve> {
    let lesions: usize = images.iter().map(|i| i.lesion_count).sum();
    if lesions == 0 {
        return Err(Error::UndefinedTpr);
    }
    let weights = vec![1.0; images.len()];
    Ok(Pooled::new(images).curve(&weights, lesions as f64, images.len() as f64, f64::INFINITY))
}

/// Trapezoidal area under the curve on `[0, limit]`, divided by `limit`.
pub fn partial_aufc(curve: &FrocCurve, limit: f64) -> f64 {
    let mut area = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for p in &curve.points {
        if p.fppi >= limit {
            if p.fppi > px {
                let y = py + (p.tpr - py) * (limit - px) / (p.fppi - px);
                area += (limit - px) * (py + y) / 2.0;
            } else {
                area += (limit - px) * py;
            }
            return (area / limit).clamp(0.0, 1.0);
        }
        area += (p.fppi - px) * (py + p.tpr) / 2.0;
        px = p.fppi;
        py = p.tpr;
    }
    area += (limit - px) * py;
    (area / limit).clamp(0.0, 1.0)
}

/// TPR at each grid abscissa, taking the last operating point at or left of it.
pub fn sample_step(curve: &FrocCurve, grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut k = 0;
    let mut tpr = 0.0;
    for &g in grid {
        while k < curve.points.len() && curve.points[k].fppi <= g {
            tpr = curve.points[k].tpr;
            k += 1;
        }
        out.push(tpr);
    }
    out
}

pub fn fppi_grid(limit: f64) -> Vec<f64> {
    (0..=100).map(|i| limit * i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedCurve {
    pub fppi: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub aufc_a: f64,
    pub aufc_b: f64,
    pub deltas: Vec<f64>,
    pub delta_mean: f64,
    pub p_value: f64,
    pub iterations: usize,
    pub seed: u64,
    pub curve_a: AveragedCurve,
    pub curve_b: AveragedCurve,
}

impl BootstrapResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn average_curves(grid: &[f64], samples: &[Vec<f64>]) -> AveragedCurve {
    let n = samples.len();
    let mut mean = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; n];
    for g in 0..grid.len() {
        for (c, s) in column.iter_mut().zip(samples) {
            *c = s[g];
        }
        mean.push(column.iter().sum::<f64>() / n as f64);
        column.sort_by(f64::total_cmp);
        lower.push(percentile(&column, 0.025));
        upper.push(percentile(&column, 0.975));
    }
    AveragedCurve {
        fppi: grid.to_vec(),
        mean,
        lower,
        upper,
    }
}

/// Case-resampling comparison of two methods evaluated on the same images.
///
/// Iteration `i` draws from its own generator stream, so results do not depend
/// on how iterations are scheduled.
pub fn bootstrap_compare(a: &[MatchedImage], b: &[MatchedImage], config: &EvalConfig) -> Result<BootstrapResult> {
    config.validate()?;
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.image_id != y.image_id) {
        return Err(Error::InvalidComparison(
            "the two result sets do not cover the same image list".into(),
        ));
    }
    if let Some((x, _)) = a.iter().zip(b).find(|(x, y)| x.lesion_count != y.lesion_count) {
        return Err(Error::InvalidComparison(format!(
            "lesion counts differ for image {}",
            x.image_id
        )));
    }
    let aufc_a = partial_aufc(&froc_curve(a)?, config.fppi_limit);
    let aufc_b = partial_aufc(&froc_curve(b)?, config.fppi_limit);

    let n = a.len();
    let limit = config.fppi_limit;
    let grid = fppi_grid(limit);
    let pooled_a = Pooled::new(a);
    let pooled_b = Pooled::new(b);
    let mut deltas = Vec::with_capacity(config.bootstrap_iterations);
    let mut samples_a = Vec::with_capacity(config.bootstrap_iterations);
    let mut samples_b = Vec::with_capacity(config.bootstrap_iterations);
    let mut weights = vec![0.0; n];
    for iter in 0..config.bootstrap_iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(iter as u64);
        weights.iter_mut().for_each(|w| *w = 0.0);
        for _ in 0..n {
            weights[rng.random_range(0..n)] += 1.0;
        }
        let lesions: f64 = a.iter().zip(&weights).map(|(img, w)| img.lesion_count as f64 * w).sum();
        let ca = pooled_a.curve(&weights, lesions, n as f64, limit);
        let cb = pooled_b.curve(&weights, lesions, n as f64, limit);
        deltas.push(partial_aufc(&ca, limit) - partial_aufc(&cb, limit));
        samples_a.push(sample_step(&ca, &grid));
        samples_b.push(sample_step(&cb, &grid));
    }
    let non_positive = deltas.iter().filter(|&&d| d <= 0.0).count();
    Ok(BootstrapResult {
        aufc_a,
        aufc_b,
        delta_mean: deltas.iter().sum::<f64>() / deltas.len() as f64,
        p_value: non_positive as f64 / deltas.len() as f64,
        iterations: config.bootstrap_iterations,
        seed: config.rng_seed,
        curve_a: average_curves(&grid, &samples_a),
        curve_b: average_curves(&grid, &samples_b),
        deltas,
    })
}

pub fn write_froc(path: &Path, curve: &FrocCurve) -> Result<()> {
    let mut out = String::from("threshold,fppi,tpr\n");
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.threshold, p.fppi, p.tpr).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
