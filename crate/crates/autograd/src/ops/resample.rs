use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One output coordinate's two source taps along an axis.
#[derive(Clone, Copy, Debug)]
struct AxisTap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

/// Half-pixel-centre mapping (`align_corners = false`).
fn axis_taps(input: usize, output: usize) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            AxisTap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of an NCHW tensor with half-pixel centres.
pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let (wy1, wy0) = (T::from_f64_lossy(a.w_hi), T::from_f64_lossy(1.0 - a.w_hi));
            for (ox, b) in tx.iter().enumerate() {
                let (wx1, wx0) = (T::from_f64_lossy(b.w_hi), T::from_f64_lossy(1.0 - b.w_hi));
                dst[oy * ow + ox] = wy0 * (wx0 * src[a.lo * w + b.lo] + wx1 * src[a.lo * w + b.hi])
                    + wy1 * (wx0 * src[a.hi * w + b.lo] + wx1 * src[a.hi * w + b.hi]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Region of interest in continuous feature-map coordinates (pixel `i`
/// covers `[i, i+1)`), on batch item `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Bilinear taps in the ROI-align convention: clamp to the border inside
/// `[-1, size]`, zero outside.
fn roi_taps(h: usize, w: usize, y: f64, x: f64) -> Option<[(usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// Sampling points (one per bin centre) of a ROI on an `oh x ow` grid.
fn roi_points(roi: &Roi, oh: usize, ow: usize) -> Vec<(f64, f64)> {
    let bh = (roi.y1 - roi.y0) / oh as f64;
    let bw = (roi.x1 - roi.x0) / ow as f64;
    let mut pts = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            // continuous coordinate -> index space
            let y = roi.y0 + (i as f64 + 0.5) * bh - 0.5;
            let x = roi.x0 + (j as f64 + 0.5) * bw - 0.5;
            pts.push((y, x));
        }
    }
    pts
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g, T> {
        let xv = self.value();
        let out = resize_bilinear_forward(&xv, oh, ow);
        let shape = xv.shape().to_vec();
        self.graph.push(out, &[self.id], move |g, _| {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let ty = axis_taps(h, oh);
            let tx = axis_taps(w, ow);
            let mut dx = vec![T::zero(); n * c * h * w];
            for (p, gsrc) in g.data().chunks(oh * ow).enumerate() {
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, a) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::from_f64_lossy(a.w_hi), T::from_f64_lossy(1.0 - a.w_hi));
                    for (ox, b) in tx.iter().enumerate() {
                        let (wx1, wx0) =
                            (T::from_f64_lossy(b.w_hi), T::from_f64_lossy(1.0 - b.w_hi));
                        let gv = gsrc[oy * ow + ox];
                        d[a.lo * w + b.lo] = d[a.lo * w + b.lo] + gv * wy0 * wx0;
                        d[a.lo * w + b.hi] = d[a.lo * w + b.hi] + gv * wy0 * wx1;
                        d[a.hi * w + b.lo] = d[a.hi * w + b.lo] + gv * wy1 * wx0;
                        d[a.hi * w + b.hi] = d[a.hi * w + b.hi] + gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, dx))]
        })
    }

    /// ROI align with one sample per bin: returns `(R, C, oh, ow)`.
    pub fn roi_align(self, rois: &[Roi], oh: usize, ow: usize) -> Var<'g, T> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let r = rois.len();
        let mut out = vec![T::zero(); r * c * oh * ow];
        let taps: Vec<Vec<Option<[(usize, f64); 4]>>> = rois
            .iter()
            .map(|roi| {
                assert!(roi.batch < n, "roi batch index out of range");
                roi_points(roi, oh, ow)
                    .into_iter()
                    .map(|(y, x)| roi_taps(h, w, y, x))
                    .collect()
            })
            .collect();
        for (ri, (roi, tp)) in rois.iter().zip(&taps).enumerate() {
            for ch in 0..c {
                let plane =
                    &xv.data()[(roi.batch * c + ch) * h * w..(roi.batch * c + ch + 1) * h * w];
                for (q, t) in tp.iter().enumerate() {
                    if let Some(t) = t {
                        out[(ri * c + ch) * oh * ow + q] = t
                            .iter()
                            .map(|&(i, wt)| T::from_f64_lossy(wt) * plane[i])
                            .sum();
                    }
                }
            }
        }
        let batches: Vec<usize> = rois.iter().map(|r| r.batch).collect();
        let shape = xv.shape().to_vec();
        self.graph.push(
            Tensor::new(&[r, c, oh, ow], out),
            &[self.id],
            move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (ri, (&b, tp)) in batches.iter().zip(&taps).enumerate() {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for (q, t) in tp.iter().enumerate() {
                            let gv = g.data()[(ri * c + ch) * oh * ow + q];
                            if let Some(t) = t {
                                for &(i, wt) in t {
                                    dx[base + i] = dx[base + i] + gv * T::from_f64_lossy(wt);
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, dx))]
            },
        )
    }
}
