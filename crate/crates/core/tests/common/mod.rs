//! Brute-force oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use ccdnet::data::{BBox, Detection};
use ccdnet::params::{BnMode, Ctx, ParamStore};
use ccdnet::Result;
use ccdnet_autograd::{Graph, Tensor, Var};
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

// ---- boxes ----

/// IoU of two boxes computed from scratch.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---- nine regions ----

#[derive(Debug, PartialEq)]
pub struct RegionOracle {
    pub y0: isize,
    pub x0: isize,
    pub h: usize,
    pub w: usize,
    pub on_map: [bool; 9],
    pub valid: [bool; 9],
}

/// Cells `[i*s, (i+1)*s)` that overlap `[lo, hi)` with positive length.
fn covered(lo: f64, hi: f64, s: usize, n: usize) -> Option<(usize, usize)> {
    let cells: Vec<usize> = (0..n)
        .filter(|&i| {
            let (a, b) = ((i * s) as f64, ((i + 1) * s) as f64);
            a.max(lo) < b.min(hi)
        })
        .collect();
    Some((*cells.first()?, *cells.last()? + 1))
}

pub fn mapped_cells(g: &BBox, s: usize, mh: usize, mw: usize) -> Option<[usize; 4]> {
    let (x0, x1) = covered(g.x_min, g.x_max, s, mw)?;
    let (y0, y1) = covered(g.y_min, g.y_max, s, mh)?;
    Some([x0, y0, x1, y1])
}

/// Counts shared cells between two integer rectangles `[x0, y0, x1, y1)`.
fn cell_iou(a: [isize; 4], b: [isize; 4]) -> f64 {
    let mut inter = 0usize;
    for y in a[1]..a[3] {
        for x in a[0]..a[2] {
            if x >= b[0] && x < b[2] && y >= b[1] && y < b[3] {
                inter += 1;
            }
        }
    }
    let area = |r: [isize; 4]| ((r[2] - r[0]) * (r[3] - r[1])) as usize;
    inter as f64 / (area(a) + area(b) - inter) as f64
}

pub fn nine_regions_oracle(
    mh: usize,
    mw: usize,
    gts: &[BBox],
    target: usize,
    stride: usize,
    neighbor_iou: f64,
) -> Option<RegionOracle> {
    let [x0, y0, x1, y1] = mapped_cells(&gts[target], stride, mh, mw)?;
    let (w, h) = ((x1 - x0) as isize, (y1 - y0) as isize);
    let others: Vec<[isize; 4]> = gts
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .filter_map(|(_, g)| mapped_cells(g, stride, mh, mw))
        .map(|c| c.map(|v| v as isize))
        .collect();
    let mut on_map = [false; 9];
    let mut valid = [false; 9];
    for i in 0..9 {
        let ry = y0 as isize + (i as isize / 3 - 1) * h;
        let rx = x0 as isize + (i as isize % 3 - 1) * w;
        let mut inside = true;
        for y in ry..ry + h {
            for x in rx..rx + w {
                inside &= y >= 0 && x >= 0 && y < mh as isize && x < mw as isize;
            }
        }
        on_map[i] = inside;
        let r = [rx, ry, rx + w, ry + h];
        valid[i] = inside && (i == 4 || others.iter().all(|&o| cell_iou(r, o) <= neighbor_iou));
    }
    Some(RegionOracle {
        y0: y0 as isize,
        x0: x0 as isize,
        h: h as usize,
        w: w as usize,
        on_map,
        valid,
    })
}

// ---- region statistics ----

/// `(mean, max, mean gradient magnitude)` of a `[C, H, W]` region.
pub fn region_stat_oracle(r: &[Vec<Vec<f64>>]) -> (f64, f64, f64) {
    let (c, h, w) = (r.len(), r[0].len(), r[0][0].len());
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for plane in r {
        for row in plane {
            for &v in row {
                sum += v;
                max = max.max(v);
            }
        }
    }
    let hh = if h >= 2 { h - 1 } else { h };
    let ww = if w >= 2 { w - 1 } else { w };
    let mut g = 0.0;
    for plane in r {
        for y in 0..hh {
            for x in 0..ww {
                let dx = if w >= 2 {
                    plane[y][x + 1] - plane[y][x]
                } else {
                    0.0
                };
                let dy = if h >= 2 {
                    plane[y + 1][x] - plane[y][x]
                } else {
                    0.0
                };
                g += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    (sum / (c * h * w) as f64, max, g / (c * hh * ww) as f64)
}

pub fn diff_oracle(v: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..9 {
        out[i] = if i == 4 { v[4] } else { (v[i] - v[4]).abs() };
    }
    out
}

/// Double loop over pixels and channels of two `[C, H, W]` grids.
pub fn lcm_loss_oracle(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>], eps: f64) -> f64 {
    let (c, h, w) = (a.len(), a[0].len(), a[0][0].len());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for grid in [a, b] {
        for plane in grid {
            for row in plane {
                for &v in row {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
    }
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut l1 = 0.0;
            for ch in 0..c {
                l1 += (a[ch][y][x] - b[ch][y][x]).abs();
            }
            s += ((l1 + eps) / (hi - lo + eps)).ln();
        }
    }
    -s / (h * w) as f64
}

pub fn to_nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|y| (0..w).map(|x| t.data()[(ch * h + y) * w + x]).collect())
                .collect()
        })
        .collect()
}

// ---- NMS and matching ----

/// Repeatedly takes the best remaining detection (earliest on ties) and
/// drops everything that overlaps it above the threshold.
pub fn nms_oracle(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        keep.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && iou(&dets[i].bbox, &dets[b].bbox) > t {
                alive[i] = false;
            }
        }
    }
    keep
}

/// `(tp, fp, fn, matched (det, gt) pairs)` of greedy matching.
pub fn match_oracle(
    dets: &[Detection],
    gts: &[BBox],
    iou_t: Option<f64>,
) -> (usize, usize, usize, Vec<(usize, usize)>) {
    let mut done = vec![false; dets.len()];
    let mut used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut fp = 0;
    for _ in 0..dets.len() {
        let mut d: Option<usize> = None;
        for i in 0..dets.len() {
            if !done[i] && d.is_none_or(|b| dets[i].score > dets[b].score) {
                d = Some(i);
            }
        }
        let d = d.unwrap();
        done[d] = true;
        let b = &dets[d].bbox;
        let (cx, cy) = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(b, gt);
            let ok = match iou_t {
                Some(t) => v >= t,
                None => cx >= gt.x_min && cx < gt.x_max && cy >= gt.y_min && cy < gt.y_max,
            };
            if !used[g] && ok && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                pairs.push((d, g));
            }
            None => fp += 1,
        }
    }
    let tp = pairs.len();
    (tp, fp, gts.len() - tp, pairs)
}

// ---- Otsu and components ----

pub fn bin_oracle(v: f64) -> usize {
    let v = v.clamp(0.0, 1.0);
    ((v * 256.0).floor() as usize).min(255)
}

/// Between-class variance `w0 w1 (m0 - m1)^2` (counts as weights) at split
/// bin `t`, from the raw values.
pub fn otsu_variance(values: &[f64], t: usize) -> f64 {
    let centre = |v: f64| (bin_oracle(v) as f64 + 0.5) / 256.0;
    let (lo, hi): (Vec<f64>, Vec<f64>) = values.iter().map(|&v| (bin_oracle(v), centre(v))).fold(
        (Vec::new(), Vec::new()),
        |(mut lo, mut hi), (b, c)| {
            if b <= t {
                lo.push(c)
            } else {
                hi.push(c)
            }
            (lo, hi)
        },
    );
    if lo.is_empty() || hi.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    lo.len() as f64 * hi.len() as f64 * (m(&lo) - m(&hi)).powi(2)
}

/// Best split by exhaustive search, `None` when every split is one-sided.
pub fn otsu_oracle(values: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for t in 0..255 {
        let v = otsu_variance(values, t);
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((t, v));
        }
    }
    best
}

/// Union-find labelling with 8-connectivity; boxes sorted by their first
/// row-major pixel.
pub fn components_oracle(w: usize, h: usize, fg: &[bool]) -> Vec<BBox> {
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            for (dx, dy) in [(1i64, 0i64), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if fg[q] {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, q));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut boxes: Vec<(usize, [usize; 4])> = Vec::new();
    let mut first: std::collections::HashMap<usize, usize> = Default::default();
    for p in 0..w * h {
        if !fg[p] {
            continue;
        }
        let r = find(&mut parent, p);
        let (x, y) = (p % w, p / w);
        let k = *first.entry(r).or_insert_with(|| {
            boxes.push((p, [x, y, x, y]));
            boxes.len() - 1
        });
        let b = &mut boxes[k].1;
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    boxes.sort_by_key(|(p, _)| *p);
    boxes
        .into_iter()
        .map(|(_, b)| {
            BBox::new(
                b[0] as f64,
                b[1] as f64,
                (b[2] + 1) as f64,
                (b[3] + 1) as f64,
            )
        })
        .collect()
}

// ---- finite differences through a parameter store ----

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences of `f` with respect to the named store entries,
/// compared with the tape gradient. Relative error uses a floor of `floor`
/// on the denominator.
pub fn store_gradcheck<F>(
    store: &ParamStore<f64>,
    names: &[String],
    h: f64,
    floor: f64,
    max_per: usize,
    f: F,
) -> FdReport
where
    F: for<'g> Fn(&Ctx<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let ctx = Ctx::new(&g, store, BnMode::Batch);
        let out = f(&ctx).expect("forward");
        let grads = g.backward(out);
        names
            .iter()
            .map(|n| grads.get_or_zeros(ctx.param(n).expect("param")))
            .collect()
    };
    let eval = |s: &ParamStore<f64>| -> f64 {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, s, BnMode::Batch);
        f(&ctx).expect("forward").item()
    };
    let mut work = store.clone();
    let mut rep = FdReport::default();
    for (n, a) in names.iter().zip(&analytic) {
        let len = a.numel();
        let step = len.div_ceil(max_per.max(1)).max(1);
        for j in (0..len).step_by(step) {
            let orig = store.get(n).unwrap().data()[j];
            work.get_mut(n).unwrap().data_mut()[j] = orig + h;
            let fp = eval(&work);
            work.get_mut(n).unwrap().data_mut()[j] = orig - h;
            let fm = eval(&work);
            work.get_mut(n).unwrap().data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            let an = a.data()[j];
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(floor);
            rep.checked += 1;
            if rel >= rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{n}[{j}]: analytic {an:.6e} numeric {num:.6e}");
            }
        }
    }
    rep
}
