//! Gravity-point grid generation and hooking.
//!
//! A gravity point is a pixel anchor. One copy of a small base layout is
//! placed in every `K x K` feature grid (the image region covered by one
//! feature-map cell), and every point lying closer than the hooking distance
//! to a lesion center is trained to move onto it.
//!
//! Ordering is fixed: cells row-major, then the base layout row-major. The
//! gravity point at `(j*K + bx, i*K + by)` is head slot
//! `(i*W_FM + j)*N_AP + a`, with `a` the index of `(bx, by)` in the base
//! layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn squared_distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Ground-truth lesion: center of its smallest enclosing box plus the box extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    pub center: Point,
    pub bbox_width: f64,
    pub bbox_height: f64,
}

impl LesionAnnotation {
    pub fn new(x: f64, y: f64, bbox_width: f64, bbox_height: f64) -> Self {
        Self {
            center: Point::new(x, y),
            bbox_width,
            bbox_height,
        }
    }

    pub fn largest_side(&self) -> f64 {
        self.bbox_width.max(self.bbox_height)
    }

    /// Checks the extents and that the center lies inside a `width x height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.bbox_width > 0.0 && self.bbox_height > 0.0) {
            return Err(Error::Annotation(format!(
                "lesion at ({}, {}) has non-positive box {}x{}",
                self.center.x, self.center.y, self.bbox_width, self.bbox_height
            )));
        }
        let inside = self.center.x >= 0.0
            && self.center.y >= 0.0
            && self.center.x < width as f64
            && self.center.y < height as f64;
        if !inside {
            return Err(Error::Annotation(format!(
                "lesion center ({}, {}) outside {}x{} image",
                self.center.x, self.center.y, width, height
            )));
        }
        Ok(())
    }
}

/// Image and feature-map geometry plus the gravity-point layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub fm_height: usize,
    pub fm_width: usize,
    pub step: usize,
    pub hooking_distance: f64,
}

impl GridConfig {
    /// Size `K` of the square feature grid. Also validates the dimensions.
    pub fn grid_size(&self) -> Result<usize> {
        compute_feature_grid_size(
            self.image_height,
            self.image_width,
            self.fm_height,
            self.fm_width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.grid_size()?;
        check_step(k, self.step)?;
        if !(self.hooking_distance > 0.0) || !self.hooking_distance.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "hooking distance must be positive, got {}",
                self.hooking_distance
            )));
        }
        Ok(())
    }

    /// Gravity points per feature grid (the anchors per head position).
    pub fn per_grid_count(&self) -> Result<usize> {
        let k = self.grid_size()?;
        check_step(k, self.step)?;
        Ok(axis_count(k, self.step).pow(2))
    }
}

/// `K = ceil(H / H_FM)`; the width ratio must round up to the same value.
pub fn compute_feature_grid_size(
    height: usize,
    width: usize,
    fm_height: usize,
    fm_width: usize,
) -> Result<usize> {
    if height == 0 || width == 0 || fm_height == 0 || fm_width == 0 {
        return Err(Error::InvalidGeometry(format!(
            "all dimensions must be positive (image {height}x{width}, feature map {fm_height}x{fm_width})"
        )));
    }
    if fm_height > height || fm_width > width {
        return Err(Error::InvalidGeometry(format!(
            "feature map {fm_height}x{fm_width} larger than image {height}x{width}"
        )));
    }
    let k_h = height.div_ceil(fm_height);
    let k_w = width.div_ceil(fm_width);
    if k_h != k_w {
        return Err(Error::NonSquareGrid { k_h, k_w });
    }
    Ok(k_h)
}

fn check_step(k: usize, step: usize) -> Result<()> {
    let max = k as i64 - 2;
    if step == 0 || step as i64 > max {
        return Err(Error::InvalidStep { step, max });
    }
    Ok(())
}

fn axis_count(k: usize, step: usize) -> usize {
    (k - 2) / step + 1
}

/// Grid-local gravity-point positions inside one `K x K` feature grid, row-major.
pub fn generate_base_configuration(k: usize, step: usize) -> Result<Vec<(usize, usize)>> {
    check_step(k, step)?;
    let axis: Vec<usize> = (0..axis_count(k, step)).map(|i| i * step).collect();
    Ok(axis
        .iter()
        .flat_map(|&y| axis.iter().map(move |&x| (x, y)))
        .collect())
}

/// The full gravity-point layout of an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityPointSet {
    pub points: Vec<Point>,
    /// Head output slot of each point. The identity unless points falling
    /// outside the image were dropped (geometries with `K * H_FM > H`).
    pub slots: Vec<usize>,
    pub per_grid_count: usize,
    pub grid_size: usize,
    pub fm_height: usize,
    pub fm_width: usize,
}

impl GravityPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of head slots, `N_AP * H_FM * W_FM`.
    pub fn slot_count(&self) -> usize {
        self.per_grid_count * self.fm_height * self.fm_width
    }

    pub fn is_dense(&self) -> bool {
        self.points.len() == self.slot_count()
    }
}

pub fn generate_gravity_points(config: &GridConfig) -> Result<GravityPointSet> {
    let k = config.grid_size()?;
    let base = generate_base_configuration(k, config.step)?;
    let per_grid = base.len();
    let total = per_grid * config.fm_height * config.fm_width;
    let mut points = Vec::with_capacity(total);
    let mut slots = Vec::with_capacity(total);
    for i in 0..config.fm_height {
        for j in 0..config.fm_width {
            let cell = i * config.fm_width + j;
            for (a, &(bx, by)) in base.iter().enumerate() {
                let x = j * k + bx;
                let y = i * k + by;
                if x < config.image_width && y < config.image_height {
                    points.push(Point::new(x as f64, y as f64));
                    slots.push(cell * per_grid + a);
                }
            }
        }
    }
    Ok(GravityPointSet {
        points,
        slots,
        per_grid_count: per_grid,
        grid_size: k,
        fm_height: config.fm_height,
        fm_width: config.fm_width,
    })
}

/// Per-gravity-point training targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HookingAssignment {
    pub positive: Vec<bool>,
    pub matched_lesion: Vec<Option<usize>>,
    /// `lesion_center - point` for positives, zero elsewhere.
    pub target_offset: Vec<[f64; 2]>,
}

impl HookingAssignment {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    /// Concatenates assignments, e.g. over the images of a mini-batch.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a HookingAssignment>) -> Self {
        let mut out = HookingAssignment {
            positive: Vec::new(),
            matched_lesion: Vec::new(),
            target_offset: Vec::new(),
        };
        for p in parts {
            out.positive.extend_from_slice(&p.positive);
            out.matched_lesion.extend_from_slice(&p.matched_lesion);
            out.target_offset.extend_from_slice(&p.target_offset);
        }
        out
    }
}

/// Index of the nearest lesion center; ties go to the lowest index.
fn nearest_lesion(point: &Point, lesions: &[LesionAnnotation]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, lesion) in lesions.iter().enumerate() {
        let d2 = point.squared_distance(&lesion.center);
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((idx, d2));
        }
    }
    best
}

/// Labels a point positive when its nearest lesion center is strictly closer
/// than `hooking_distance`.
pub fn hook_gravity_points(
    points: &GravityPointSet,
    lesions: &[LesionAnnotation],
    hooking_distance: f64,
) -> HookingAssignment {
    let n = points.len();
    let mut positive = vec![false; n];
    let mut matched_lesion = vec![None; n];
    let mut target_offset = vec![[0.0; 2]; n];
    if lesions.is_empty() {
        return HookingAssignment {
            positive,
            matched_lesion,
            target_offset,
        };
    }

    // Only points within reach of some lesion can be positive; scan the
    // bounding window of each lesion instead of every point when dense.
    let candidates: Vec<usize> = if points.is_dense() && points.grid_size > 0 {
        candidate_points(points, lesions, hooking_distance)
    } else {
        (0..n).collect()
    };

    let dh2 = hooking_distance * hooking_distance;
    for idx in candidates {
        let p = &points.points[idx];
        if let Some((lesion, d2)) = nearest_lesion(p, lesions) {
            if d2 < dh2 {
                let c = lesions[lesion].center;
                positive[idx] = true;
                matched_lesion[idx] = Some(lesion);
                target_offset[idx] = [c.x - p.x, c.y - p.y];
            }
        }
    }
    HookingAssignment {
        positive,
        matched_lesion,
        target_offset,
    }
}

/// Indices of points in cells overlapping any lesion's hooking window, sorted and unique.
fn candidate_points(
    points: &GravityPointSet,
    lesions: &[LesionAnnotation],
    hooking_distance: f64,
) -> Vec<usize> {
    let k = points.grid_size as f64;
    let mut cells = Vec::new();
    for lesion in lesions {
        let c = lesion.center;
        let i0 = ((c.y - hooking_distance) / k).floor().max(0.0) as usize;
        let j0 = ((c.x - hooking_distance) / k).floor().max(0.0) as usize;
        let i1 = (((c.y + hooking_distance) / k).floor().max(0.0) as usize).min(points.fm_height - 1);
        let j1 = (((c.x + hooking_distance) / k).floor().max(0.0) as usize).min(points.fm_width - 1);
        for i in i0..=i1.max(i0).min(points.fm_height - 1) {
            for j in j0..=j1.max(j0).min(points.fm_width - 1) {
                cells.push(i * points.fm_width + j);
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    let per = points.per_grid_count;
    cells
        .into_iter()
        .flat_map(|cell| cell * per..(cell + 1) * per)
        .collect()
}

/// Per lesion, how many gravity points are hooked to it.
pub fn hooking_coverage(
    points: &GravityPointSet,
    lesions: &[LesionAnnotation],
    hooking_distance: f64,
) -> Vec<usize> {
    let mut counts = vec![0; lesions.len()];
    let assignment = hook_gravity_points(points, lesions, hooking_distance);
    for lesion in assignment.matched_lesion.iter().flatten() {
        counts[*lesion] += 1;
    }
    counts
}
