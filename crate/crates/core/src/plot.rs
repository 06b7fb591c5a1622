//! Raster figures: feature heatmaps, LCM surfaces and box overlays.

use std::path::Path;

use ccdnet_autograd::{Scalar, Tensor};

use crate::data::{write_rgb_png, BBox, Detection, IrImage};
use crate::error::{shape_err, Result};

pub const GT_COLOR: [u8; 3] = [230, 40, 40];
pub const DET_COLOR: [u8; 3] = [40, 220, 60];

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bg: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: bg
                .iter()
                .copied()
                .cycle()
                .take(3 * width * height)
                .collect(),
        }
    }

    pub fn from_gray(img: &IrImage) -> Self {
        let rgb = img
            .data
            .iter()
            .flat_map(|&v| {
                let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [b, b, b]
            })
            .collect();
        Self {
            width: img.width,
            height: img.height,
            rgb,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = 3 * (y * self.width + x);
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let o = 3 * (y as usize * self.width + x as usize);
            self.rgb[o..o + 3].copy_from_slice(&c);
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// One-pixel outline on the box's boundary pixels.
    pub fn rect(&mut self, b: &BBox, c: [u8; 3]) {
        let (x0, y0) = (b.x_min.floor() as i64, b.y_min.floor() as i64);
        let (x1, y1) = (b.x_max.ceil() as i64 - 1, b.y_max.ceil() as i64 - 1);
        self.line((x0, y0), (x1, y0), c);
        self.line((x1, y0), (x1, y1), c);
        self.line((x1, y1), (x0, y1), c);
        self.line((x0, y1), (x0, y0), c);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rgb_png(path, self.width, self.height, self.rgb.clone())
    }
}

/// Blue-cyan-yellow-red ramp over `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.3, 1.0]),
        (0.5, [0.0, 0.9, 0.9]),
        (0.75, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let i = STOPS
        .iter()
        .rposition(|(s, _)| *s <= t)
        .unwrap_or(0)
        .min(STOPS.len() - 2);
    let ((a, ca), (b, cb)) = (STOPS[i], STOPS[i + 1]);
    let f = (t - a) / (b - a);
    std::array::from_fn(|k| ((ca[k] + f * (cb[k] - ca[k])) * 255.0).round() as u8)
}

/// Channel mean of a `(1, C, H, W)` (or `(C, H, W)`) map, min-max scaled
/// to `[0, 1]`; a constant map becomes all zeros. Returns `(w, h, values)`.
pub fn heatmap_values<T: Scalar>(feature: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = match feature.shape() {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        s => return shape_err(format!("heatmap needs a single feature map, got {s:?}")),
    };
    let d = feature.data();
    let mut v: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..c)
                .map(|ch| d[ch * h * w + p].to_f64_lossy())
                .sum::<f64>()
                / c as f64
        })
        .collect();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    for x in &mut v {
        *x = if hi > lo { (*x - lo) / (hi - lo) } else { 0.0 };
    }
    Ok((w, h, v))
}

/// Heatmap upsampled (nearest) to `out_w x out_h`.
pub fn render_heatmap<T: Scalar>(
    feature: &Tensor<T>,
    out_w: usize,
    out_h: usize,
) -> Result<Canvas> {
    let (w, h, v) = heatmap_values(feature)?;
    let mut c = Canvas::new(out_w, out_h, [0, 0, 0]);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = (x * w / out_w, y * h / out_h);
            c.put(x as i64, y as i64, colormap(v[sy * w + sx]));
        }
    }
    Ok(c)
}

/// Ground truth in red, detections in green, over the grayscale image.
pub fn render_boxes(img: &IrImage, gts: &[BBox], dets: &[Detection]) -> Canvas {
    let mut c = Canvas::from_gray(img);
    for g in gts {
        c.rect(g, GT_COLOR);
    }
    for d in dets {
        c.rect(&d.bbox, DET_COLOR);
    }
    c
}

const PANEL: usize = 320;

/// Isometric wireframe of a channel-mean surface into a square panel at
/// horizontal offset `ox`, using a shared height scale `[lo, hi]`.
fn draw_surface(c: &mut Canvas, ox: usize, (w, h, v): &(usize, usize, Vec<f64>), lo: f64, hi: f64) {
    let (w, h) = (*w, *h);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (PANEL as f64 * 0.7) / ((w + h) as f64 * 0.87);
    let project = |x: usize, y: usize| -> (i64, i64) {
        let z = (v[y * w + x] - lo) / span;
        let u = ox as f64 + PANEL as f64 / 2.0 + (x as f64 - y as f64) * 0.87 * cell;
        let r = PANEL as f64 * 0.55 + (x as f64 + y as f64) * 0.5 * cell - z * PANEL as f64 * 0.4;
        (u.round() as i64, r.round() as i64)
    };
    for y in 0..h {
        for x in 0..w {
            let col = colormap((v[y * w + x] - lo) / span);
            if x + 1 < w {
                c.line(project(x, y), project(x + 1, y), col);
            }
            if y + 1 < h {
                c.line(project(x, y), project(x, y + 1), col);
            }
        }
    }
}

/// `P_in` (left) and `P_out` (right) as surfaces of the channel mean.
pub fn render_surfaces<T: Scalar>(p_in: &Tensor<T>, p_out: &Tensor<T>) -> Result<Canvas> {
    let mean = |t: &Tensor<T>| -> Result<(usize, usize, Vec<f64>)> {
        let (c, h, w) = match t.shape() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            s => return shape_err(format!("surface needs (C, H, W), got {s:?}")),
        };
        let d = t.data();
        Ok((
            w,
            h,
            (0..h * w)
                .map(|p| {
                    (0..c)
                        .map(|ch| d[ch * h * w + p].to_f64_lossy())
                        .sum::<f64>()
                        / c as f64
                })
                .collect(),
        ))
    };
    let (a, b) = (mean(p_in)?, mean(p_out)?);
    let all = a.2.iter().chain(&b.2);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let mut c = Canvas::new(2 * PANEL, PANEL, [255, 255, 255]);
    draw_surface(&mut c, 0, &a, lo, hi);
    draw_surface(&mut c, PANEL, &b, lo, hi);
    c.line(
        (PANEL as i64, 0),
        (PANEL as i64, PANEL as i64 - 1),
        [180, 180, 180],
    );
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_uniform() {
        let f = Tensor::<f32>::full(&[1, 3, 4, 4], 2.5);
        let c = render_heatmap(&f, 8, 8).unwrap();
        let p = c.pixel(0, 0);
        assert!((0..8).all(|y| (0..8).all(|x| c.pixel(x, y) == p)));
    }

    #[test]
    fn boxes_without_detections_are_red_only() {
        let img = IrImage::filled(16, 16, 0.2);
        let c = render_boxes(&img, &[BBox::new(2.0, 3.0, 6.0, 8.0)], &[]);
        assert_eq!(c.pixel(2, 3), GT_COLOR);
        assert_eq!(c.pixel(5, 7), GT_COLOR);
        assert!(!c.rgb.chunks(3).any(|p| p == DET_COLOR));
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [204, 0, 0]);
    }
}
