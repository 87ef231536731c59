//! Minimal raster drawing for report figures: lines, rectangles, 8x8 bitmap
//! text and a pinned colormap. Output is PNG via the `image` crate.

use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub type Color = [u8; 3];

pub const WHITE: Color = [255, 255, 255];
pub const BLACK: Color = [0, 0, 0];
pub const GRAY: Color = [150, 150, 150];

/// Categorical palette for per-class curves.
pub const PALETTE: [Color; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Viridis sampled at nine evenly spaced stops; values in between are
/// linearly interpolated.
const VIRIDIS: [Color; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Maps `t` in `[0, 1]` (clamped) onto the heat ramp.
pub fn heat_color(t: f64) -> Color {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8)
}

pub struct Canvas {
    pub image: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: Color) -> Self {
        Canvas {
            image: RgbImage::from_pixel(width, height, Rgb(background)),
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn put(&mut self, x: i64, y: i64, color: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.width() && (y as u32) < self.height() {
            self.image.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Color) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    pub fn stroke_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Color) {
        self.line(x as f64, y as f64, (x + w - 1) as f64, y as f64, color, 1);
        self.line(x as f64, (y + h - 1) as f64, (x + w - 1) as f64, (y + h - 1) as f64, color, 1);
        self.line(x as f64, y as f64, x as f64, (y + h - 1) as f64, color, 1);
        self.line((x + w - 1) as f64, y as f64, (x + w - 1) as f64, (y + h - 1) as f64, color, 1);
    }

    /// Straight line with a square pen of `thickness` pixels.
    pub fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: Color, thickness: i64) {
        self.dashed_line(x0, y0, x1, y1, color, thickness, None);
    }

    /// `dash` is `(on, off)` in pixels along the line.
    #[allow(clippy::too_many_arguments)]
    pub fn dashed_line(
        &mut self,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        color: Color,
        thickness: i64,
        dash: Option<(usize, usize)>,
    ) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        let half = (thickness - 1) / 2;
        for i in 0..=steps {
            if let Some((on, off)) = dash {
                if i % (on + off) >= on {
                    continue;
                }
            }
            let t = i as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * t).round() as i64;
            let y = (y0 + (y1 - y0) * t).round() as i64;
            self.fill_rect(x - half, y - half, thickness, thickness, color);
        }
    }

    /// ASCII text with its top-left corner at `(x, y)`; each glyph is
    /// `8 * scale` pixels square. Non-ASCII characters render as `?`.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: Color, scale: i64) {
        for (i, ch) in text.chars().enumerate() {
            let code = if ch.is_ascii() { ch as usize } else { '?' as usize };
            let glyph = BASIC_LEGACY[code];
            let ox = x + i as i64 * 8 * scale;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.fill_rect(ox + col * scale, y + row as i64 * scale, scale, scale, color);
                    }
                }
            }
        }
    }

    pub fn text_width(text: &str, scale: i64) -> i64 {
        text.chars().count() as i64 * 8 * scale
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.image.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
