//! FROC plots rendered straight into RGB pixels. The plot area always spans
//! `[0, limit]` false positives per image by `[0, 1]` sensitivity, with light
//! grid lines at every integer FPPI and every 0.1 of sensitivity.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::{AveragedCurve, FrocCurve};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
const MARGIN: f64 = 40.0;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);

/// Line colours assigned to curves in order.
pub const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

pub struct Canvas {
    img: RgbImage,
    limit: f64,
}

impl Canvas {
    pub fn new(limit: f64) -> Self {
        let mut canvas = Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND),
            limit,
        };
        canvas.draw_frame();
        canvas
    }

    fn to_px(&self, fppi: f64, tpr: f64) -> (f64, f64) {
        let w = WIDTH as f64 - 2.0 * MARGIN;
        let h = HEIGHT as f64 - 2.0 * MARGIN;
        let x = MARGIN + fppi.clamp(0.0, self.limit) / self.limit * w;
        let y = HEIGHT as f64 - MARGIN - tpr.clamp(0.0, 1.0) * h;
        (x, y)
    }

    fn put(&mut self, x: i64, y: i64, colour: Rgb<u8>, alpha: f64) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let p = self.img.get_pixel_mut(x as u32, y as u32);
        for c in 0..3 {
            let old = p.0[c] as f64;
            p.0[c] = (old + (colour.0[c] as f64 - old) * alpha).round() as u8;
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), colour: Rgb<u8>, thick: bool) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a.0 + (b.0 - a.0) * t).round() as i64;
            let y = (a.1 + (b.1 - a.1) * t).round() as i64;
            self.put(x, y, colour, 1.0);
            if thick {
                self.put(x + 1, y, colour, 1.0);
                self.put(x, y + 1, colour, 1.0);
            }
        }
    }

    fn draw_frame(&mut self) {
        let ticks = self.limit.floor() as usize;
        for i in 0..=ticks {
            let (x0, y0) = self.to_px(i as f64, 0.0);
            let (_, y1) = self.to_px(i as f64, 1.0);
            self.line((x0, y0), (x0, y1), GRID, false);
            self.line((x0, y0), (x0, y0 + 5.0), AXIS, false);
        }
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let (x0, y) = self.to_px(0.0, t);
            let (x1, _) = self.to_px(self.limit, t);
            self.line((x0, y), (x1, y), GRID, false);
            self.line((x0 - 5.0, y), (x0, y), AXIS, false);
        }
        let corners = [
            self.to_px(0.0, 0.0),
            self.to_px(self.limit, 0.0),
            self.to_px(self.limit, 1.0),
            self.to_px(0.0, 1.0),
        ];
        for i in 0..4 {
            self.line(corners[i], corners[(i + 1) % 4], AXIS, false);
        }
    }

    /// Step curve through the operating points, extended flat to the limit.
    pub fn froc(&mut self, curve: &FrocCurve, colour: Rgb<u8>) {
        let mut prev = self.to_px(0.0, 0.0);
        for p in &curve.points {
            if p.fppi > self.limit {
                break;
            }
            let next = self.to_px(p.fppi, p.tpr);
            self.line(prev, next, colour, true);
            prev = next;
        }
        let end = (self.to_px(self.limit, 0.0).0, prev.1);
        self.line(prev, end, colour, true);
    }

    /// Mean curve over a translucent band between the lower and upper bounds.
    pub fn band(&mut self, curve: &AveragedCurve, colour: Rgb<u8>) {
        for i in 0..curve.fppi.len().saturating_sub(1) {
            let (xa, _) = self.to_px(curve.fppi[i], 0.0);
            let (xb, _) = self.to_px(curve.fppi[i + 1], 0.0);
            let (_, top) = self.to_px(0.0, curve.upper[i]);
            let (_, bottom) = self.to_px(0.0, curve.lower[i]);
            for x in xa.round() as i64..xb.round() as i64 {
                for y in top.round() as i64..=bottom.round() as i64 {
                    self.put(x, y, colour, 0.25);
                }
            }
        }
        for i in 1..curve.fppi.len() {
            let a = self.to_px(curve.fppi[i - 1], curve.mean[i - 1]);
            let b = self.to_px(curve.fppi[i], curve.mean[i]);
            self.line(a, b, colour, true);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.img.get_pixel(x, y).0
    }
}

pub fn plot_froc(path: &Path, curve: &FrocCurve, limit: f64) -> Result<()> {
    let mut canvas = Canvas::new(limit);
    canvas.froc(curve, PALETTE[0]);
    canvas.save(path)
}

pub fn plot_averaged(path: &Path, curves: &[&AveragedCurve], limit: f64) -> Result<()> {
    let mut canvas = Canvas::new(limit);
    for (curve, colour) in curves.iter().zip(PALETTE.iter().cycle()) {
        canvas.band(curve, *colour);
    }
    canvas.save(path)
}
