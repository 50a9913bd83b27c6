//! Single-channel float images and binary masks.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Min-max normalization to `[0, 1]`; a constant image maps to zeros.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if !(range > 0.0) || !range.is_finite() {
            self.data.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        self.data.iter_mut().for_each(|v| *v = (*v - lo) / range);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for (src, dst) in self.data.chunks_exact(self.width).zip(out.data.chunks_exact_mut(self.width)) {
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[self.width - 1 - x];
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for (y, dst) in out.data.chunks_exact_mut(self.width).enumerate() {
            let src = self.height - 1 - y;
            dst.copy_from_slice(&self.data[src * self.width..(src + 1) * self.width]);
        }
        out
    }

    /// Copies the `width x height` window starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(x0 + width <= self.width && y0 + height <= self.height, "crop window");
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Self::new(width, height, data)
    }

    /// Moves content by `(dx, dy)` pixels; uncovered pixels repeat the edge.
    pub fn shift(&self, dx: i64, dy: i64) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            let row = shifted(y, dy, self.height) * self.width;
            data.extend((0..self.width).map(|x| self.data[row + shifted(x, dx, self.width)]));
        }
        Self::new(self.width, self.height, data)
    }

    /// Bilinear resampling with pixel centers aligned
    /// (`src = (dst + 0.5) * scale - 0.5`).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        Self::new(width, height, data)
    }
}

/// Source index of output index `i` after shifting by `d`, clamped to the edge.
fn shifted(i: usize, d: i64, len: usize) -> usize {
    (i as i64 - d).clamp(0, len as i64 - 1) as usize
}

/// Binary mask; `true` marks valid tissue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn check_size(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::InvalidMask(format!(
                "mask is {}x{} but the image is {}x{}",
                self.width, self.height, width, height
            )));
        }
        Ok(())
    }

    fn map_pixels(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = f(x, y);
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        self.map_pixels(|x, y| (self.width - 1 - x, y))
    }

    pub fn shift(&self, dx: i64, dy: i64) -> Self {
        self.map_pixels(|x, y| (shifted(x, dx, self.width), shifted(y, dy, self.height)))
    }

    pub fn flip_vertical(&self) -> Self {
        self.map_pixels(|x, y| (x, self.height - 1 - y))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                data.push(self.get(sx, sy));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        let mut img = Image::new(2, 2, vec![2.0, 4.0, 6.0, 10.0]);
        img.normalize_min_max();
        assert_eq!(img.data, vec![0.0, 0.25, 0.5, 1.0]);
        let mut flat = Image::filled(3, 1, 7.0);
        flat.normalize_min_max();
        assert_eq!(flat.data, vec![0.0; 3]);
    }

    #[test]
    fn flips() {
        let img = Image::new(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(img.flip_horizontal().data, vec![3., 2., 1., 6., 5., 4.]);
        assert_eq!(img.flip_vertical().data, vec![4., 5., 6., 1., 2., 3.]);
        let mut m = Mask::zeros(3, 2);
        m.set(0, 0, true);
        assert!(m.flip_horizontal().get(2, 0));
        assert!(m.flip_vertical().get(0, 1));
    }

    #[test]
    fn crop_and_resize() {
        let img = Image::new(3, 3, (0..9).map(|v| v as f32).collect());
        assert_eq!(img.crop(1, 1, 2, 2).data, vec![4., 5., 7., 8.]);
        let same = img.resize_bilinear(3, 3);
        assert_eq!(same, img);
        let up = Image::new(2, 1, vec![0.0, 1.0]).resize_bilinear(4, 1);
        assert_eq!(up.data, vec![0.0, 0.25, 0.75, 1.0]);
        let m = Mask::ones(4, 4).resize_nearest(2, 2);
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn mask_size_check() {
        assert!(Mask::ones(4, 3).check_size(4, 3).is_ok());
        assert!(matches!(Mask::ones(4, 3).check_size(3, 4), Err(Error::InvalidMask(_))));
    }
}
