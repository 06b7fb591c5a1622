//! Mask to box conversion: 8-connected components and Otsu binarisation.

use super::BBox;
use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "{} mask values for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Any non-zero value is foreground, so both `{0,1}` and `{0,255}` work.
    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        Self::new(width, height, data.iter().map(|&v| v != 0).collect())
    }

    /// Filled rectangles of integer boxes, clipped to the mask.
    pub fn render(width: usize, height: usize, boxes: &[BBox]) -> Self {
        let mut data = vec![false; width * height];
        for b in boxes {
            let c = b.clip(width as f64, height as f64);
            for y in c.y_min.max(0.0) as usize..c.y_max.max(0.0) as usize {
                for x in c.x_min.max(0.0) as usize..c.x_max.max(0.0) as usize {
                    data[y * width + x] = true;
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }
}

/// Tight box of every 8-connected foreground component, in the row-major
/// order of each component's first pixel.
pub fn mask_to_boxes(mask: &BinaryMask) -> Vec<BBox> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(BBox::new(
            x0 as f64,
            y0 as f64,
            (x1 + 1) as f64,
            (y1 + 1) as f64,
        ));
    }
    out
}

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu split on a 256-bin histogram of `[0, 1]`: returns the last
/// background bin `t` maximising the between-class variance (first maximum
/// wins), or `None` when the values occupy a single bin.
pub fn otsu_bin(values: &[f64]) -> Option<usize> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    let total = values.len() as f64;
    let centre = |i: usize| (i as f64 + 0.5) / OTSU_BINS as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * centre(i))
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for t in 0..OTSU_BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += hist[t] as f64 * centre(t);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Threshold value: foreground is `v >= otsu_threshold`.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    otsu_bin(values).map(|t| (t + 1) as f64 / OTSU_BINS as f64)
}

/// Otsu binarisation followed by [`mask_to_boxes`]; a constant mask has no
/// foreground class and yields no boxes.
pub fn soft_mask_to_boxes(width: usize, height: usize, values: &[f64]) -> Result<Vec<BBox>> {
    if values.len() != width * height {
        return Err(Error::Data(format!(
            "{} mask values for {width}x{height}",
            values.len()
        )));
    }
    let Some(t) = otsu_bin(values) else {
        return Ok(Vec::new());
    };
    let mask = BinaryMask::new(
        width,
        height,
        values.iter().map(|&v| bin_of(v) > t).collect(),
    )?;
    Ok(mask_to_boxes(&mask))
}
