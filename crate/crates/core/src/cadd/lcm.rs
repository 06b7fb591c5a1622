//! Local contrast over a 3x3 grid of same-size regions around each target.

use ccdnet_autograd::{Graph, Scalar, Tensor, Var};

use super::instrument;
use super::LossWeights;
use crate::data::BBox;
use crate::error::{shape_err, Result};
use crate::params::{Ctx, ParamStore};

/// Clamp used in the log ratio and in the range denominator.
pub const LCM_EPS: f64 = 1e-6;
pub const TARGET: usize = 4;

/// Geometry of the nine regions (row-major, index 4 is the target) on one
/// pyramid level of one batch item. Coordinates are level cells.
#[derive(Clone, Debug, PartialEq)]
pub struct NineRegionPatch {
    pub level: usize,
    pub batch: usize,
    /// Top-left cell of the target region.
    pub y0: isize,
    pub x0: isize,
    pub h: usize,
    pub w: usize,
    /// Region lies fully inside the map.
    pub on_map: [bool; 9],
    /// On the map and not overlapping another target.
    pub valid: [bool; 9],
}

impl NineRegionPatch {
    pub fn region_origin(&self, i: usize) -> (isize, isize) {
        let (r, c) = ((i / 3) as isize - 1, (i % 3) as isize - 1);
        (self.y0 + r * self.h as isize, self.x0 + c * self.w as isize)
    }

    /// Region `i` as a box in level cells.
    pub fn region_box(&self, i: usize) -> BBox {
        let (y, x) = self.region_origin(i);
        BBox::new(
            x as f64,
            y as f64,
            (x + self.w as isize) as f64,
            (y + self.h as isize) as f64,
        )
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// GT box in level cells: floor on the min corner, ceil on the max corner,
/// clamped to the map and to at least one cell.
pub fn map_to_level(gt: &BBox, stride: usize, map_h: usize, map_w: usize) -> Option<BBox> {
    if gt.is_degenerate() || map_h == 0 || map_w == 0 {
        return None;
    }
    let s = stride as f64;
    let (w, h) = (map_w as f64, map_h as f64);
    let x0 = (gt.x_min / s).floor().max(0.0);
    let y0 = (gt.y_min / s).floor().max(0.0);
    let mut x1 = (gt.x_max / s).ceil().min(w);
    let mut y1 = (gt.y_max / s).ceil().min(h);
    if x0 >= w || y0 >= h || x1 <= 0.0 || y1 <= 0.0 {
        return None;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    Some(BBox::new(x0, y0, x1, y1))
}

/// Lays out the nine regions around `all_gts[target]`. Neighbours off the
/// map, or overlapping another mapped GT with IoU above `neighbor_iou`, are
/// invalid. `None` is the skip signal for a target that maps to nothing.
#[allow(clippy::too_many_arguments)]
pub fn extract_nine_regions(
    map_h: usize,
    map_w: usize,
    all_gts: &[BBox],
    target: usize,
    stride: usize,
    level: usize,
    batch: usize,
    neighbor_iou: f64,
) -> Option<NineRegionPatch> {
    let m = map_to_level(all_gts.get(target)?, stride, map_h, map_w)?;
    let others: Vec<BBox> = all_gts
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .filter_map(|(_, g)| map_to_level(g, stride, map_h, map_w))
        .collect();
    let mut patch = NineRegionPatch {
        level,
        batch,
        y0: m.y_min as isize,
        x0: m.x_min as isize,
        h: m.height() as usize,
        w: m.width() as usize,
        on_map: [false; 9],
        valid: [false; 9],
    };
    for i in 0..9 {
        let (y, x) = patch.region_origin(i);
        let on = y >= 0 && x >= 0 && y as usize + patch.h <= map_h && x as usize + patch.w <= map_w;
        patch.on_map[i] = on;
        let r = patch.region_box(i);
        patch.valid[i] = on && (i == TARGET || others.iter().all(|o| r.iou(o) <= neighbor_iou));
    }
    instrument::patch_built();
    Some(patch)
}

/// Per-region statistics and their Eq.-10-style differences to the target.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RegionStats {
    pub mu: [f64; 9],
    pub max: [f64; 9],
    pub grad: [f64; 9],
    pub mu_prime: [f64; 9],
    pub max_prime: [f64; 9],
    pub grad_prime: [f64; 9],
}

// ---- tape building blocks ----

pub(crate) fn crops<'g, T: Scalar>(
    feature: Var<'g, T>,
    patch: &NineRegionPatch,
) -> [Option<Var<'g, T>>; 9] {
    let item = feature.narrow(0, patch.batch, 1);
    std::array::from_fn(|i| {
        patch.valid[i].then(|| {
            let (y, x) = patch.region_origin(i);
            item.crop(y as usize, x as usize, patch.h, patch.w)
        })
    })
}

/// Mean over the region of `sqrt(dx^2 + dy^2)` with forward differences;
/// an axis is shrunk by one only when it has at least two samples.
fn mean_gradient<'g, T: Scalar>(r: Var<'g, T>) -> Var<'g, T> {
    let (_, _, h, w) = r.value().dims4();
    let (hh, ww) = (
        if h >= 2 { h - 1 } else { h },
        if w >= 2 { w - 1 } else { w },
    );
    let g = r.graph();
    let c = r.value().shape()[1];
    let gx = if w >= 2 {
        r.narrow(3, 1, w - 1)
            .sub(r.narrow(3, 0, w - 1))
            .narrow(2, 0, hh)
    } else {
        g.constant(Tensor::zeros(&[1, c, hh, ww]))
    };
    let gy = if h >= 2 {
        r.narrow(2, 1, h - 1)
            .sub(r.narrow(2, 0, h - 1))
            .narrow(3, 0, ww)
    } else {
        g.constant(Tensor::zeros(&[1, c, hh, ww]))
    };
    gx.square().add(gy.square()).sqrt().mean()
}

/// `(mu, max, grad)` as `[9]` vectors; invalid regions contribute zeros.
pub(crate) fn stats_graph<'g, T: Scalar>(
    g: &'g Graph<T>,
    regions: &[Option<Var<'g, T>>; 9],
) -> [Var<'g, T>; 3] {
    let zero = g.constant(Tensor::zeros(&[1]));
    let collect = |f: &dyn Fn(Var<'g, T>) -> Var<'g, T>| -> Var<'g, T> {
        let parts: Vec<_> = regions.iter().map(|r| r.map_or(zero, f)).collect();
        g.concat(&parts, 0)
    };
    [
        collect(&|r: Var<'g, T>| r.mean()),
        collect(&|r: Var<'g, T>| r.max_all()),
        collect(&|r: Var<'g, T>| mean_gradient(r)),
    ]
}

/// `x'_i = |x_i - x_5|` for `i != 5` and `x'_5 = x_5` (1-based indices).
pub(crate) fn diff_graph<'g, T: Scalar>(v: Var<'g, T>) -> Var<'g, T> {
    let g = v.graph();
    let center = v.gather_flat(&[TARGET]);
    let mut keep = Tensor::zeros(&[9]);
    keep.data_mut()[TARGET] = T::one();
    let others = Tensor::from_fn(&[9], |i| if i == TARGET { T::zero() } else { T::one() });
    v.sub(center)
        .abs()
        .mul(g.constant(others))
        .add(v.mul(g.constant(keep)))
}

/// Shared three-layer MLP `9 -> h -> h -> 9` with ReLU between layers.
pub(crate) struct Mlp<'g, T: Scalar> {
    layers: [(Var<'g, T>, Var<'g, T>); 3],
}

impl<'g, T: Scalar> Mlp<'g, T> {
    pub(crate) fn from_ctx(ctx: &Ctx<'g, T>) -> Result<Self> {
        let l = |i: usize| -> Result<(Var<'g, T>, Var<'g, T>)> {
            Ok((
                ctx.param(&format!("cadd.lcm.fc{i}.weight"))?,
                ctx.param(&format!("cadd.lcm.fc{i}.bias"))?,
            ))
        };
        Ok(Self {
            layers: [l(1)?, l(2)?, l(3)?],
        })
    }

    pub(crate) fn apply(&self, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x.reshape(&[1, 9]);
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.linear(*w, Some(*b));
            if i < 2 {
                h = h.relu();
            }
        }
        h
    }

    /// `softmax(MLP(mu') + MLP(m') + MLP(delta'))`, shape `[1, 9]`.
    pub(crate) fn weights(&self, diffs: &[Var<'g, T>; 3]) -> Var<'g, T> {
        let logits = self
            .apply(diffs[0])
            .add(self.apply(diffs[1]))
            .add(self.apply(diffs[2]));
        logits.softmax_last()
    }
}

pub(crate) fn reweight<'g, T: Scalar>(
    regions: &[Option<Var<'g, T>>; 9],
    w: Var<'g, T>,
) -> [Option<Var<'g, T>>; 9] {
    std::array::from_fn(|i| regions[i].map(|r| r.mul(w.gather_flat(&[i]).reshape(&[1, 1, 1, 1]))))
}

/// `-(1/HW) sum log((|P_in - P_out|_1 + eps) / (range + eps))` over the
/// pixels of the given region pairs; the l1 norm runs over channels and
/// `range` spans both maps.
pub(crate) fn loss_graph<'g, T: Scalar>(
    pairs: &[(Var<'g, T>, Var<'g, T>)],
    hw: usize,
) -> Var<'g, T> {
    let (first, _) = pairs[0];
    let g = first.graph();
    let flat: Vec<Var<'g, T>> = pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .map(|v| {
            let n = v.value().numel();
            v.reshape(&[n])
        })
        .collect();
    let all = g.concat(&flat, 0);
    let eps = T::from_f64_lossy(LCM_EPS);
    let log_range = all.max_all().sub(all.min_all()).add_scalar(eps).ln();
    let mut acc: Option<Var<'g, T>> = None;
    let mut pixels = 0usize;
    for &(a, b) in pairs {
        let (n, _, h, w) = a.value().dims4();
        pixels += n * h * w;
        let d = a
            .sub(b)
            .abs()
            .sum_to(&[n, 1, h, w])
            .add_scalar(eps)
            .ln()
            .sum();
        acc = Some(acc.map_or(d, |s| s.add(d)));
    }
    let total = acc
        .expect("non-empty")
        .sub(log_range.scale(T::from_usize(pixels).unwrap()));
    total.scale(-T::one() / T::from_usize(hw).unwrap())
}

/// LCM loss of one target patch on the tape.
pub(crate) fn patch_loss<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    feature: Var<'g, T>,
    patch: &NineRegionPatch,
) -> Result<Var<'g, T>> {
    let regions = crops(feature, patch);
    let stats = stats_graph(ctx.graph, &regions);
    let diffs = stats.map(diff_graph);
    let w = Mlp::from_ctx(ctx)?.weights(&diffs);
    let out = reweight(&regions, w);
    let pairs: Vec<_> = regions
        .iter()
        .zip(&out)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    Ok(loss_graph(&pairs, 9 * patch.h * patch.w))
}

/// Mean over targets, then over the four levels, then over the batch.
/// Targets that map to nothing are left out of their level's mean; levels
/// or images without any target contribute 0.
pub fn lcm_loss_extended<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    features: &[Var<'g, T>; 4],
    gts: &[Vec<BBox>],
    strides: [usize; 4],
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    instrument::loss_called();
    let g = ctx.graph;
    let b_count = gts.len();
    if b_count == 0 {
        return Ok(g.scalar(T::zero()));
    }
    let mut batch_sum: Option<Var<'g, T>> = None;
    for (b, boxes) in gts.iter().enumerate() {
        let mut level_sum: Option<Var<'g, T>> = None;
        for (l, &f) in features.iter().enumerate() {
            let (n, _, h, wd) = f.value().dims4();
            if b >= n {
                return shape_err(format!(
                    "feature batch {n} smaller than annotation batch {b_count}"
                ));
            }
            let mut losses = Vec::new();
            for k in 0..boxes.len() {
                if let Some(p) =
                    extract_nine_regions(h, wd, boxes, k, strides[l], l, b, w.neighbor_iou)
                {
                    losses.push(patch_loss(ctx, f, &p)?);
                }
            }
            if losses.is_empty() {
                continue;
            }
            let m = losses.len();
            let s = losses[1..].iter().fold(losses[0], |a, &v| a.add(v));
            let mean = s.scale(T::one() / T::from_usize(m).unwrap());
            level_sum = Some(level_sum.map_or(mean, |a| a.add(mean)));
        }
        if let Some(ls) = level_sum {
            let per_image = ls.scale(T::one() / T::from_usize(features.len()).unwrap());
            batch_sum = Some(batch_sum.map_or(per_image, |a| a.add(per_image)));
        }
    }
    Ok(match batch_sum {
        Some(s) => s.scale(T::one() / T::from_usize(b_count).unwrap()),
        None => g.scalar(T::zero()),
    })
}

// ---- plain-tensor entry points ----

fn as_nchw<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.rank() {
        3 => {
            let s = t.shape();
            Ok(t.clone().reshape(&[1, s[0], s[1], s[2]]))
        }
        4 if t.shape()[0] == 1 => Ok(t.clone()),
        _ => shape_err(format!("expected (C, h, w) region, got {:?}", t.shape())),
    }
}

fn to9<T: Scalar>(v: Var<'_, T>) -> [f64; 9] {
    let d = v.value().to_f64_vec();
    std::array::from_fn(|i| d[i])
}

/// Mean, max and mean forward-difference gradient magnitude per region;
/// `None` marks an invalid region (statistics 0).
pub fn region_stats<T: Scalar>(regions: &[Option<Tensor<T>>; 9]) -> Result<RegionStats> {
    let g = Graph::inference();
    let mut vars: [Option<Var<'_, T>>; 9] = [None; 9];
    for (slot, r) in vars.iter_mut().zip(regions) {
        if let Some(r) = r {
            *slot = Some(g.constant(as_nchw(r)?));
        }
    }
    let [mu, max, grad] = stats_graph(&g, &vars);
    Ok(RegionStats {
        mu: to9(mu),
        max: to9(max),
        grad: to9(grad),
        ..RegionStats::default()
    })
}

/// Fills the primed vectors from `mu`, `max`, `grad`.
pub fn difference_vectors(stats: &RegionStats) -> RegionStats {
    let d = |v: &[f64; 9]| -> [f64; 9] {
        std::array::from_fn(|i| {
            if i == TARGET {
                v[TARGET]
            } else {
                (v[i] - v[TARGET]).abs()
            }
        })
    };
    RegionStats {
        mu_prime: d(&stats.mu),
        max_prime: d(&stats.max),
        grad_prime: d(&stats.grad),
        ..stats.clone()
    }
}

/// Region weights `w` (summing to 1) and the reweighted regions
/// `R'_i = w_i R_i`, with the MLP read from `cadd.lcm.*` in `mlp`.
#[allow(clippy::type_complexity)]
pub fn lcm_reweight<T: Scalar>(
    regions: &[Option<Tensor<T>>; 9],
    stats: &RegionStats,
    mlp: &ParamStore<T>,
) -> Result<([f64; 9], [Option<Tensor<T>>; 9])> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, mlp, crate::params::BnMode::Running);
    let vec = |v: &[f64; 9]| g.constant(Tensor::from_f64(&[9], v));
    let diffs = [
        vec(&stats.mu_prime),
        vec(&stats.max_prime),
        vec(&stats.grad_prime),
    ];
    let w = Mlp::from_ctx(&ctx)?.weights(&diffs);
    let w9 = to9(w);
    let out = std::array::from_fn(|i| {
        regions[i]
            .as_ref()
            .map(|r| r.scale(T::from_f64_lossy(w9[i])))
    });
    Ok((w9, out))
}

/// Loss between two whole grids `(C, H, W)` (or `(1, C, H, W)`).
pub fn lcm_loss<T: Scalar>(p_in: &Tensor<T>, p_out: &Tensor<T>) -> Result<f64> {
    if p_in.shape() != p_out.shape() {
        return shape_err(format!("{:?} vs {:?}", p_in.shape(), p_out.shape()));
    }
    let a = as_nchw(p_in)?;
    let (_, _, h, w) = a.dims4();
    let g = Graph::inference();
    let pair = (g.constant(a), g.constant(as_nchw(p_out)?));
    Ok(loss_graph(&[pair], h * w).item().to_f64_lossy())
}

/// `(P_in, P_out)` grids `(C, 3h, 3w)` of one patch, zero where invalid.
pub fn patch_grids<T: Scalar>(
    store: &ParamStore<T>,
    feature: &Tensor<T>,
    patch: &NineRegionPatch,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, crate::params::BnMode::Running);
    let f = g.constant(feature.clone());
    let regions = crops(f, patch);
    let stats = stats_graph(&g, &regions);
    let w = Mlp::from_ctx(&ctx)?.weights(&stats.map(diff_graph));
    let out = reweight(&regions, w);
    let c = feature.shape()[1];
    let (h, w) = (patch.h, patch.w);
    let assemble = |rs: &[Option<Var<'_, T>>; 9]| {
        let mut grid = Tensor::zeros(&[c, 3 * h, 3 * w]);
        for (i, r) in rs.iter().enumerate() {
            let Some(r) = r else { continue };
            let v = r.value();
            let (gy, gx) = ((i / 3) * h, (i % 3) * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        grid.set(&[ch, gy + y, gx + x], v.at(&[0, ch, y, x]));
                    }
                }
            }
        }
        grid
    };
    Ok((assemble(&regions), assemble(&out)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_example() {
        let m = map_to_level(&BBox::new(8.0, 8.0, 16.0, 16.0), 2, 32, 32).unwrap();
        assert_eq!(m, BBox::new(4.0, 4.0, 8.0, 8.0));
        let p = extract_nine_regions(32, 32, &[BBox::new(8.0, 8.0, 16.0, 16.0)], 0, 2, 0, 0, 0.3)
            .unwrap();
        assert_eq!((p.y0, p.x0, p.h, p.w), (4, 4, 4, 4));
        assert_eq!(p.region_origin(0), (0, 0));
        assert_eq!(p.region_origin(8), (8, 8));
        assert!(p.valid.iter().all(|&v| v));
    }

    #[test]
    fn corner_and_edge_targets() {
        let corner =
            extract_nine_regions(16, 16, &[BBox::new(0.0, 0.0, 4.0, 4.0)], 0, 1, 0, 0, 0.3)
                .unwrap();
        assert_eq!(corner.valid.iter().filter(|&&v| !v).count(), 5);
        let edge = extract_nine_regions(16, 16, &[BBox::new(6.0, 0.0, 10.0, 4.0)], 0, 1, 0, 0, 0.3)
            .unwrap();
        assert_eq!(edge.valid.iter().filter(|&&v| !v).count(), 3);
    }

    #[test]
    fn tiny_gt_clamps_to_one_cell() {
        let m = map_to_level(&BBox::new(9.0, 9.0, 10.0, 10.0), 16, 4, 4).unwrap();
        assert_eq!(m, BBox::new(0.0, 0.0, 1.0, 1.0));
        assert!(map_to_level(&BBox::new(70.0, 70.0, 80.0, 80.0), 16, 4, 4).is_none());
    }

    #[test]
    fn difference_vector_example() {
        let mut s = RegionStats::default();
        s.mu = [0.2, 0.3, 0.4, 0.5, 0.9, 0.1, 0.0, 0.6, 0.7];
        let d = difference_vectors(&s);
        assert!((d.mu_prime[0] - 0.7).abs() < 1e-12);
        assert_eq!(d.mu_prime[4], 0.9);
        let same = difference_vectors(&RegionStats {
            mu: [0.4; 9],
            max: [1.0; 9],
            grad: [0.2; 9],
            ..RegionStats::default()
        });
        for i in (0..9).filter(|&i| i != TARGET) {
            assert_eq!(
                (same.mu_prime[i], same.max_prime[i], same.grad_prime[i]),
                (0.0, 0.0, 0.0)
            );
        }
    }

    #[test]
    fn constant_and_ramp_regions() {
        let c = Tensor::<f64>::full(&[2, 3, 4], 0.7);
        let ramp = Tensor::<f64>::from_fn(&[1, 4, 5], |i| (i % 5) as f64);
        let mut regions: [Option<Tensor<f64>>; 9] = Default::default();
        regions[0] = Some(c);
        regions[4] = Some(ramp);
        let s = region_stats(&regions).unwrap();
        assert!(
            (s.mu[0] - 0.7).abs() < 1e-12 && (s.max[0] - 0.7).abs() < 1e-12 && s.grad[0] == 0.0
        );
        assert_eq!(s.grad[4], 1.0);
        assert_eq!(s.max[4], 4.0);
        assert_eq!((s.mu[1], s.max[1], s.grad[1]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_pixel_analytic_loss() {
        let a = Tensor::<f64>::full(&[1, 1, 1], 1.0);
        let b = Tensor::<f64>::full(&[1, 1, 1], 0.5);
        // range over both maps is 0.5 here, so compare against the formula
        let want = -((0.5 + LCM_EPS) / (0.5 + LCM_EPS)).ln();
        assert!((lcm_loss(&a, &b).unwrap() - want).abs() < 1e-12);
        // a two-pixel map with range 1 reproduces log 0.5 for the first pixel
        let a = Tensor::<f64>::from_f64(&[1, 1, 2], &[1.0, 0.0]);
        let b = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.5, 0.0]);
        let psi0 = ((0.5 + LCM_EPS) / (1.0 + LCM_EPS)).ln();
        let psi1 = ((0.0 + LCM_EPS) / (1.0 + LCM_EPS)).ln();
        assert!((psi0 - 0.5f64.ln()).abs() < 1e-5);
        let want = -(psi0 + psi1) / 2.0;
        assert!((lcm_loss(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn identical_maps_give_large_loss() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 3], |i| i as f64 * 0.1);
        let l = lcm_loss(&a, &a).unwrap();
        let range = 1.7;
        assert!((l + (LCM_EPS / (range + LCM_EPS)).ln()).abs() < 1e-9);
        assert!(l > 10.0);
    }
}
