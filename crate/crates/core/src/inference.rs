//! Turning per-gravity-point predictions into detections: move each point by
//! its regressed offset, keep the best-scoring candidates, drop those outside
//! the tissue mask, then suppress duplicates with greedy NMS over `L x L`
//! boxes centered on the moved points.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{GravityPointSet, Point};
use crate::error::{Error, Result};
use crate::model::Predictions;
use crate::raster::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub box_side: f64,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub prefilter_top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            box_side: 7.0,
            iou_threshold: 0.5,
            score_threshold: 0.5,
            prefilter_top_k: 5000,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.box_side >= 1.0) {
            return Err(Error::InvalidConfig(format!("box side must be >= 1, got {}", self.box_side)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidConfig(format!(
                "score threshold must lie in [0, 1], got {}",
                self.score_threshold
            )));
        }
        if self.prefilter_top_k == 0 {
            return Err(Error::InvalidConfig("prefilter_top_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub position: Point,
    pub score: f64,
    /// Index of the originating gravity point; breaks score ties.
    pub index: usize,
    pub is_lesion: bool,
}

impl Detection {
    pub fn new(x: f64, y: f64, score: f64, index: usize) -> Self {
        Self {
            position: Point::new(x, y),
            score,
            index,
            is_lesion: false,
        }
    }
}

/// Descending score, then ascending gravity-point index.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Moves every gravity point by its offset and keeps the `top_k` best-scoring candidates.
pub fn decode(points: &GravityPointSet, preds: &Predictions, top_k: usize) -> Result<Vec<Detection>> {
    if preds.scores.len() != points.len() || preds.offsets.len() != points.len() {
        return Err(Error::InvalidInput(format!(
            "{} gravity points but {} scores and {} offsets",
            points.len(),
            preds.scores.len(),
            preds.offsets.len()
        )));
    }
    let mut candidates: Vec<Detection> = points
        .points
        .iter()
        .zip(&preds.scores)
        .zip(&preds.offsets)
        .enumerate()
        .map(|(i, ((p, &s), o))| Detection::new(p.x + o[0], p.y + o[1], s, i))
        .collect();
    if top_k < candidates.len() {
        candidates.select_nth_unstable_by(top_k, score_order);
        candidates.truncate(top_k);
    }
    candidates.sort_by(score_order);
    Ok(candidates)
}

/// IoU of two `side x side` boxes centered on `a` and `b`.
pub fn iou(a: &Point, b: &Point, side: f64) -> f64 {
    let ox = (side - (a.x - b.x).abs()).max(0.0);
    let oy = (side - (a.y - b.y).abs()).max(0.0);
    let inter = ox * oy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (2.0 * side * side - inter)
}

/// Greedy suppression over score-sorted candidates.
pub fn nms(candidates: &[Detection], config: &InferenceConfig) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    // Kept boxes bucketed on a grid of cell size `side`: only boxes in
    // neighbouring cells can overlap.
    let side = config.box_side;
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    let cell = |p: &Point| ((p.x / side).floor() as i64, (p.y / side).floor() as i64);
    'outer: for cand in candidates {
        let (cx, cy) = cell(&cand.position);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = buckets.get(&(cx + dx, cy + dy)) {
                    for &k in ids {
                        if iou(&kept[k].position, &cand.position, side) > config.iou_threshold {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        buckets.entry((cx, cy)).or_default().push(kept.len());
        kept.push(*cand);
    }
    kept
}

/// Drops candidates whose rounded position falls on a zero mask pixel.
pub fn apply_tissue_mask(
    candidates: &[Detection],
    mask: &Mask,
    image_width: usize,
    image_height: usize,
) -> Result<Vec<Detection>> {
    mask.check_size(image_width, image_height)?;
    let clamp = |v: f64, len: usize| (v.round().max(0.0) as usize).min(len - 1);
    Ok(candidates
        .iter()
        .filter(|d| {
            let x = clamp(d.position.x, mask.width);
            let y = clamp(d.position.y, mask.height);
            mask.get(x, y)
        })
        .copied()
        .collect())
}

/// Marks detections scoring strictly above `gamma` as lesions.
pub fn classify_detections(detections: &mut [Detection], gamma: f64) {
    for d in detections {
        d.is_lesion = d.score > gamma;
    }
}

/// Full post-processing chain for one image.
pub fn postprocess(
    points: &GravityPointSet,
    preds: &Predictions,
    mask: &Mask,
    image_width: usize,
    image_height: usize,
    config: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let candidates = decode(points, preds, config.prefilter_top_k)?;
    let inside = apply_tissue_mask(&candidates, mask, image_width, image_height)?;
    let mut kept = nms(&inside, config);
    classify_detections(&mut kept, config.score_threshold);
    Ok(kept)
}

/// One row of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Writes `image_id,x,y,score` rows sorted by image id, then descending score.
pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(b.score.total_cmp(&a.score)));
    let mut out = String::with_capacity(32 * (records.len() + 1));
    out.push_str("image_id,x,y,score\n");
    for r in sorted {
        out.push_str(&format!("{},{:.3},{:.3},{:.6}\n", r.image_id, r.x, r.y, r.score));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.into(),
        source: e,
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "x", "y", "score"] {
        return Err(Error::InvalidInput(format!(
            "{}: expected header image_id,x,y,score",
            path.display()
        )));
    }
    reader
        .deserialize()
        .map(|row| {
            row.map_err(|e| Error::Csv {
                path: path.into(),
                source: e,
            })
        })
        .collect()
}
