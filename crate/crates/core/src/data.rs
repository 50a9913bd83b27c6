//! Dataset ingestion, flip augmentation, two-fold splitting and the synthetic
//! small-lesion generator.
//!
//! A dataset directory holds `index.csv` (`image_id,image_path,mask_path`,
//! paths relative to the directory, empty mask path for none) and
//! `annotations.csv` (`image_id,center_x,center_y,bbox_w,bbox_h`). Coordinates
//! are pixels, origin top-left, y downward.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{LesionAnnotation, Point};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const INDEX_FILE: &str = "index.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const SYNTHETIC_SPEC_FILE: &str = "synthetic_spec.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRule {
    #[default]
    Grayscale,
    GreenExtract,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResizeMode {
    #[default]
    Crop,
    Resize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub lesions: Vec<LesionAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub channel_rule: ChannelRule,
    /// `(height, width)` after preprocessing; `None` keeps native sizes.
    pub target_size: Option<(usize, usize)>,
    pub resize_mode: ResizeMode,
}

#[derive(Serialize, Deserialize)]
struct IndexRow {
    image_id: String,
    image_path: String,
    mask_path: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    image_id: String,
    center_x: f64,
    center_y: f64,
    bbox_w: f64,
    bbox_h: f64,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.into(),
        source,
    }
}

fn check_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(csv_err(path))?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidInput(format!(
            "{}: expected header {}",
            path.display(),
            expected.join(",")
        )));
    }
    Ok(())
}

impl DatasetManifest {
    /// Reads `index.csv` and `annotations.csv` from `dir`.
    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let mut reader = csv::Reader::from_path(&index_path).map_err(csv_err(&index_path))?;
        check_header(&index_path, &mut reader, &["image_id", "image_path", "mask_path"])?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for row in reader.deserialize::<IndexRow>() {
            let row = row.map_err(csv_err(&index_path))?;
            if !seen.insert(row.image_id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate image id {}", row.image_id)));
            }
            entries.push(ManifestEntry {
                image_id: row.image_id,
                image_path: dir.join(row.image_path),
                mask_path: row.mask_path.filter(|m| !m.is_empty()).map(|m| dir.join(m)),
                lesions: Vec::new(),
            });
        }
        let position: HashMap<String, usize> =
            entries.iter().enumerate().map(|(i, e)| (e.image_id.clone(), i)).collect();

        let ann_path = dir.join(ANNOTATIONS_FILE);
        let mut reader = csv::Reader::from_path(&ann_path).map_err(csv_err(&ann_path))?;
        check_header(&ann_path, &mut reader, &["image_id", "center_x", "center_y", "bbox_w", "bbox_h"])?;
        for row in reader.deserialize::<AnnotationRow>() {
            let row = row.map_err(csv_err(&ann_path))?;
            let &i = position.get(&row.image_id).ok_or_else(|| {
                Error::Annotation(format!("annotation for unknown image id {}", row.image_id))
            })?;
            entries[i]
                .lesions
                .push(LesionAnnotation::new(row.center_x, row.center_y, row.bbox_w, row.bbox_h));
        }
        Ok(Self {
            entries,
            channel_rule: ChannelRule::default(),
            target_size: None,
            resize_mode: ResizeMode::default(),
        })
    }

    /// Writes both files into `dir`, with paths made relative to it where possible.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
        let index_path = dir.join(INDEX_FILE);
        let mut w = csv::Writer::from_path(&index_path).map_err(csv_err(&index_path))?;
        for e in &self.entries {
            w.serialize(IndexRow {
                image_id: e.image_id.clone(),
                image_path: rel(&e.image_path),
                mask_path: Some(e.mask_path.as_deref().map(rel).unwrap_or_default()),
            })
            .map_err(csv_err(&index_path))?;
        }
        w.flush().map_err(|e| Error::io(&index_path, e))?;

        let ann_path = dir.join(ANNOTATIONS_FILE);
        let mut w = csv::Writer::from_path(&ann_path).map_err(csv_err(&ann_path))?;
        // the header must exist even when there are no lesions
        w.write_record(["image_id", "center_x", "center_y", "bbox_w", "bbox_h"])
            .map_err(csv_err(&ann_path))?;
        for e in &self.entries {
            for l in &e.lesions {
                w.write_record([
                    e.image_id.clone(),
                    l.center.x.to_string(),
                    l.center.y.to_string(),
                    l.bbox_width.to_string(),
                    l.bbox_height.to_string(),
                ])
                .map_err(csv_err(&ann_path))?;
            }
        }
        w.flush().map_err(|e| Error::io(&ann_path, e))
    }

    pub fn lesions_by_id(&self) -> HashMap<&str, &[LesionAnnotation]> {
        self.entries
            .iter()
            .map(|e| (e.image_id.as_str(), e.lesions.as_slice()))
            .collect()
    }
}

/// One preprocessed image with its mask and lesions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Image,
    pub mask: Mask,
    pub lesions: Vec<LesionAnnotation>,
}

impl Sample {
    pub fn is_healthy(&self) -> bool {
        self.lesions.is_empty()
    }
}

fn decode_image(path: &Path, rule: ChannelRule) -> Result<Image> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.into(),
            source,
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageRgb8(b) => b
            .pixels()
            .map(|p| match rule {
                ChannelRule::GreenExtract => f32::from(p[1]),
                ChannelRule::Grayscale => 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]),
            })
            .collect(),
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported pixel format {:?}; expected 8/16-bit grayscale or 8-bit RGB",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Image::new(w, h, data))
}

fn decode_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let luma = img.to_luma8();
    Ok(Mask {
        width: luma.width() as usize,
        height: luma.height() as usize,
        data: luma.into_raw().into_iter().map(|v| v > 0).collect(),
    })
}

/// Origin of a `target`-long window in `extent`: centered, then shifted as
/// little as possible so every coordinate in `coords` stays inside.
fn crop_origin(extent: usize, target: usize, coords: impl Iterator<Item = f64> + Clone) -> Option<usize> {
    let centered = (extent - target) / 2;
    let lo_needed = coords.clone().fold(f64::NEG_INFINITY, f64::max) - (target - 1) as f64;
    let hi_needed = coords.fold(f64::INFINITY, f64::min);
    let lo = lo_needed.ceil().max(0.0);
    let hi = hi_needed.floor().min((extent - target) as f64);
    if lo > hi {
        return None;
    }
    Some((centered as f64).clamp(lo, hi) as usize)
}

/// Decodes, reshapes and normalizes one manifest entry.
pub fn load_sample(entry: &ManifestEntry, manifest: &DatasetManifest) -> Result<Sample> {
    let mut image = decode_image(&entry.image_path, manifest.channel_rule)?;
    let mut mask = match &entry.mask_path {
        Some(p) => {
            let m = decode_mask(p)?;
            m.check_size(image.width, image.height)?;
            m
        }
        None => tissue_mask_default(&image),
    };
    let mut lesions = entry.lesions.clone();
    if let Some((th, tw)) = manifest.target_size {
        match manifest.resize_mode {
            ResizeMode::Crop => {
                if th > image.height || tw > image.width {
                    return Err(Error::InvalidInput(format!(
                        "{}: {}x{} image is smaller than the {}x{} crop",
                        entry.image_id, image.width, image.height, tw, th
                    )));
                }
                let x0 = crop_origin(image.width, tw, lesions.iter().map(|l| l.center.x));
                let y0 = crop_origin(image.height, th, lesions.iter().map(|l| l.center.y));
                let (Some(x0), Some(y0)) = (x0, y0) else {
                    return Err(Error::Annotation(format!(
                        "{}: no {}x{} crop keeps every lesion",
                        entry.image_id, tw, th
                    )));
                };
                image = image.crop(x0, y0, tw, th);
                mask = mask.crop(x0, y0, tw, th);
                for l in &mut lesions {
                    l.center.x -= x0 as f64;
                    l.center.y -= y0 as f64;
                }
            }
            ResizeMode::Resize => {
                let sx = tw as f64 / image.width as f64;
                let sy = th as f64 / image.height as f64;
                image = image.resize_bilinear(tw, th);
                mask = mask.resize_nearest(tw, th);
                for l in &mut lesions {
                    l.center.x = (l.center.x + 0.5) * sx - 0.5;
                    l.center.y = (l.center.y + 0.5) * sy - 0.5;
                    l.bbox_width *= sx;
                    l.bbox_height *= sy;
                }
            }
        }
    }
    for l in &lesions {
        l.validate(image.width, image.height)
            .map_err(|e| Error::Annotation(format!("{}: {e}", entry.image_id)))?;
    }
    image.normalize_min_max();
    Ok(Sample {
        image_id: entry.image_id.clone(),
        image,
        mask,
        lesions,
    })
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest.entries.iter().map(|e| load_sample(e, manifest)).collect()
}

/// All-ones mask for data that ships without tissue masks.
pub fn tissue_mask_default(image: &Image) -> Mask {
    Mask::ones(image.width, image.height)
}

pub fn flip_sample(sample: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let (w, h) = (sample.image.width as f64, sample.image.height as f64);
    let mut out = sample.clone();
    if horizontal {
        out.image = out.image.flip_horizontal();
        out.mask = out.mask.flip_horizontal();
        out.lesions.iter_mut().for_each(|l| l.center.x = w - 1.0 - l.center.x);
    }
    if vertical {
        out.image = out.image.flip_vertical();
        out.mask = out.mask.flip_vertical();
        out.lesions.iter_mut().for_each(|l| l.center.y = h - 1.0 - l.center.y);
    }
    out
}

/// Translates image, mask and lesions by whole pixels. Lesions whose center
/// leaves the image are dropped; uncovered pixels repeat the edge.
pub fn shift_sample(sample: &Sample, dx: i64, dy: i64) -> Sample {
    let (w, h) = (sample.image.width as f64, sample.image.height as f64);
    let lesions = sample
        .lesions
        .iter()
        .map(|l| LesionAnnotation {
            center: Point::new(l.center.x + dx as f64, l.center.y + dy as f64),
            ..*l
        })
        .filter(|l| (0.0..=w - 1.0).contains(&l.center.x) && (0.0..=h - 1.0).contains(&l.center.y))
        .collect();
    Sample {
        image_id: sample.image_id.clone(),
        image: sample.image.shift(dx, dy),
        mask: sample.mask.shift(dx, dy),
        lesions,
    }
}

/// Horizontal, vertical and double flips of `sample`.
pub fn augment_flips(sample: &Sample) -> [Sample; 3] {
    let tagged = |h, v, tag: &str| {
        let mut s = flip_sample(sample, h, v);
        s.image_id = format!("{}#{tag}", sample.image_id);
        s
    };
    [tagged(true, false, "h"), tagged(false, true, "v"), tagged(true, true, "hv")]
}

/// Each sample followed by its three flips.
pub fn augment_dataset(samples: &[Sample]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        out.push(s.clone());
        out.extend(augment_flips(s));
    }
    out
}

/// Image-level two-fold partition. When fold `f` is the test fold, the model
/// trains on `folds[1 - f]` minus `validation[f]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoFoldSplit {
    pub folds: [Vec<usize>; 2],
    pub validation: [Vec<usize>; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl TwoFoldSplit {
    pub fn fold(&self, test_fold: usize) -> FoldAssignment {
        assert!(test_fold < 2, "fold index must be 0 or 1");
        let val: HashSet<usize> = self.validation[test_fold].iter().copied().collect();
        FoldAssignment {
            train: self.folds[1 - test_fold].iter().copied().filter(|i| !val.contains(i)).collect(),
            validation: self.validation[test_fold].clone(),
            test: self.folds[test_fold].clone(),
        }
    }
}

/// Number of validation images carved from a training fold of `n`.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Seeded image-level split. With `healthy` given, folds and validation subsets
/// keep the healthy/unhealthy proportions.
pub fn split_twofold(count: usize, validation_fraction: f64, seed: u64, healthy: Option<&[bool]>) -> Result<TwoFoldSplit> {
    if count == 0 {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction must lie in [0, 1), got {validation_fraction}"
        )));
    }
    if healthy.is_some_and(|h| h.len() != count) {
        return Err(Error::InvalidInput("stratification flags do not match the image count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Strata are shuffled separately and concatenated; dealing the order out
    // alternately then keeps each fold's composition balanced.
    let strata: Vec<Vec<usize>> = match healthy {
        Some(h) => vec![
            (0..count).filter(|&i| !h[i]).collect(),
            (0..count).filter(|&i| h[i]).collect(),
        ],
        None => vec![(0..count).collect()],
    };
    let mut order = Vec::with_capacity(count);
    for mut s in strata {
        s.shuffle(&mut rng);
        order.extend(s);
    }
    let mut folds = [Vec::new(), Vec::new()];
    for (k, &i) in order.iter().enumerate() {
        folds[k % 2].push(i);
    }
    let mut validation = [Vec::new(), Vec::new()];
    for f in 0..2 {
        let train = &folds[1 - f];
        let n_val = validation_count(train.len(), validation_fraction);
        let mut picked = match healthy {
            Some(h) => {
                let (mut sick, mut well): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| !h[i]);
                sick.shuffle(&mut rng);
                well.shuffle(&mut rng);
                let n_sick = ((n_val as f64 * sick.len() as f64 / train.len() as f64).round() as usize)
                    .min(sick.len())
                    .max(n_val.saturating_sub(well.len()));
                let mut v: Vec<usize> = sick[..n_sick].to_vec();
                v.extend_from_slice(&well[..n_val - n_sick]);
                v
            }
            None => {
                let mut t = train.clone();
                t.shuffle(&mut rng);
                t.truncate(n_val);
                t
            }
        };
        picked.sort_unstable();
        validation[f] = picked;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(TwoFoldSplit { folds, validation })
}

/// Parameters of the synthetic small-lesion generator. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_count: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub lesions_per_image: (usize, usize),
    pub lesion_radius: (f64, f64),
    /// Blob peak amplitude as a fraction of the intensity range.
    pub lesion_contrast: (f64, f64),
    /// Dark blobs instead of bright ones.
    pub dark_lesions: bool,
    pub background_noise_sigma: f64,
    pub distractor_count: (usize, usize),
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_count: 200,
            image_size: (256, 256),
            lesions_per_image: (3, 8),
            lesion_radius: (2.0, 3.0),
            lesion_contrast: (0.4, 0.6),
            dark_lesions: false,
            background_noise_sigma: 0.02,
            distractor_count: (2, 5),
            rng_seed: 2024,
        }
    }
}

/// Placement attempts per lesion before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 1000;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidConfig(format!("{field}: {why}")));
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return bad("image_size", "dimensions must be positive");
        }
        if self.lesions_per_image.0 > self.lesions_per_image.1 {
            return bad("lesions_per_image", "lower bound exceeds upper bound");
        }
        if !(self.lesion_radius.0 >= 1.0) {
            return bad("lesion_radius", "radius must be at least 1");
        }
        if self.lesion_radius.0 > self.lesion_radius.1 {
            return bad("lesion_radius", "lower bound exceeds upper bound");
        }
        if !(self.lesion_contrast.0 > 0.0) || self.lesion_contrast.0 > self.lesion_contrast.1 {
            return bad("lesion_contrast", "contrast must be positive with lower <= upper");
        }
        if !(self.background_noise_sigma >= 0.0) {
            return bad("background_noise_sigma", "must be non-negative");
        }
        if self.distractor_count.0 > self.distractor_count.1 {
            return bad("distractor_count", "lower bound exceeds upper bound");
        }
        let margin = 2 * self.lesion_radius.1.ceil() as usize;
        if h <= 2 * margin || w <= 2 * margin {
            return bad("image_size", "too small for the lesion radius");
        }
        Ok(())
    }

    /// Minimum center spacing; keeps blob profiles from shifting each other's peaks.
    fn min_separation(&self) -> f64 {
        4.0 * self.lesion_radius.1 + 2.0
    }
}

/// One generated image before quantization.
#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub image: Image,
    /// Noise-free sum of the blob profiles alone.
    pub lesion_layer: Image,
    pub lesions: Vec<LesionAnnotation>,
}

/// Renders image `index`; every image draws from its own generator stream.
pub fn render_synthetic(spec: &SyntheticSpec, index: usize) -> Result<SyntheticImage> {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);

    // Low-frequency tissue-like background.
    let mut image = Image::filled(w, h, 0.0);
    let base = rng.random_range(0.25..0.45);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0) * std::f64::consts::TAU / w as f64,
                rng.random_range(0.5..2.0) * std::f64::consts::TAU / h as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let v: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            image.set(x, y, (base + v) as f32);
        }
    }

    // Elongated streaks that share the blobs' contrast but not their shape.
    let sign = if spec.dark_lesions { -1.0 } else { 1.0 };
    let n_streaks = rng.random_range(spec.distractor_count.0..=spec.distractor_count.1);
    for _ in 0..n_streaks {
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0.0..h as f64);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let len = rng.random_range(20.0..60.0);
        let width = rng.random_range(0.7..1.2);
        let amp = sign * rng.random_range(spec.lesion_contrast.0..=spec.lesion_contrast.1);
        let (dx, dy) = (angle.cos(), angle.sin());
        let pad = 4.0 * width;
        let xs = (x0 - pad).min(x0 + dx * len - pad).max(0.0) as usize;
        let xe = ((x0 + pad).max(x0 + dx * len + pad).ceil() as usize).min(w - 1);
        let ys = (y0 - pad).min(y0 + dy * len - pad).max(0.0) as usize;
        let ye = ((y0 + pad).max(y0 + dy * len + pad).ceil() as usize).min(h - 1);
        for y in ys..=ye {
            for x in xs..=xe {
                let (rx, ry) = (x as f64 - x0, y as f64 - y0);
                let t = (rx * dx + ry * dy).clamp(0.0, len);
                let d2 = (rx - t * dx).powi(2) + (ry - t * dy).powi(2);
                let v = amp * (-d2 / (2.0 * width * width)).exp();
                image.set(x, y, image.get(x, y) + v as f32);
            }
        }
    }

    // Lesions at integer centers, kept apart so their peaks stay exact.
    let n_lesions = rng.random_range(spec.lesions_per_image.0..=spec.lesions_per_image.1);
    let margin = 2 * spec.lesion_radius.1.ceil() as usize;
    let mut lesions: Vec<LesionAnnotation> = Vec::with_capacity(n_lesions);
    let mut lesion_layer = Image::filled(w, h, 0.0);
    for lesion in 0..n_lesions {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = rng.random_range(margin..w - margin) as f64;
            let cy = rng.random_range(margin..h - margin) as f64;
            let c = crate::anchors::Point::new(cx, cy);
            if lesions.iter().all(|l| l.center.distance(&c) >= spec.min_separation()) {
                placed = Some(c);
                break;
            }
        }
        let Some(c) = placed else {
            return Err(Error::Placement {
                image: index,
                lesion,
                attempts: PLACEMENT_ATTEMPTS,
            });
        };
        let r = rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let amp = rng.random_range(spec.lesion_contrast.0..=spec.lesion_contrast.1);
        let sigma = r / 2.0;
        let reach = (3.0 * r).ceil() as i64;
        for y in (c.y as i64 - reach).max(0)..=(c.y as i64 + reach).min(h as i64 - 1) {
            for x in (c.x as i64 - reach).max(0)..=(c.x as i64 + reach).min(w as i64 - 1) {
                let d2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                let (x, y) = (x as usize, y as usize);
                lesion_layer.set(x, y, lesion_layer.get(x, y) + v as f32);
            }
        }
        lesions.push(LesionAnnotation::new(c.x, c.y, 2.0 * r, 2.0 * r));
    }

    let noise = Normal::new(0.0, spec.background_noise_sigma.max(0.0)).expect("finite sigma");
    for (px, &l) in image.data.iter_mut().zip(&lesion_layer.data) {
        let n = if spec.background_noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        *px = (*px as f64 + sign * l as f64 + n).clamp(0.0, 1.0) as f32;
    }
    Ok(SyntheticImage {
        image,
        lesion_layer,
        lesions,
    })
}

/// Quantizes to 16 bits and writes a grayscale PNG.
pub fn write_png16(path: &Path, image: &Image) -> Result<()> {
    let data: Vec<u16> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, data).expect("buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Writes images, manifest files and the generation record into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let width = spec.image_count.saturating_sub(1).to_string().len().max(3);
    let mut entries = Vec::with_capacity(spec.image_count);
    for i in 0..spec.image_count {
        let rendered = render_synthetic(spec, i)?;
        let image_id = format!("synth_{i:0width$}");
        let path = images_dir.join(format!("{image_id}.png"));
        write_png16(&path, &rendered.image)?;
        entries.push(ManifestEntry {
            image_id,
            image_path: path,
            mask_path: None,
            lesions: rendered.lesions,
        });
    }
    let manifest = DatasetManifest {
        entries,
        channel_rule: ChannelRule::Grayscale,
        target_size: None,
        resize_mode: ResizeMode::Crop,
    };
    manifest.write(out_dir)?;
    let record_path = out_dir.join(SYNTHETIC_SPEC_FILE);
    let record = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(&record_path, record).map_err(|e| Error::io(&record_path, e))?;
    Ok(manifest)
}
