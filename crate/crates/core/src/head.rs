//! Anchor-free heads, target assignment, detection losses, decoding and NMS.

use ccdnet_autograd::{sigmoid, Conv2dSpec, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Detection};
use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Common width the per-level lateral 1x1 convolutions map to.
    pub width: usize,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: 16,
            prior: 0.01,
        }
    }
}

/// Raw regression outputs are clamped to this magnitude before `exp`.
const REG_LOG_CLAMP: f64 = 10.0;

pub fn init_head<T: Scalar>(
    cfg: &HeadConfig,
    channels: [usize; 4],
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) {
    let w = cfg.width;
    for (l, &c) in channels.iter().enumerate() {
        store.insert_param(
            format!("head.lateral{}.weight", l + 1),
            init::conv_he(rng, w, c, 1),
        );
        store.insert_param(format!("head.lateral{}.bias", l + 1), Tensor::zeros(&[w]));
    }
    for tower in ["cls", "reg"] {
        for i in 1..=2 {
            store.insert_param(
                format!("head.{tower}.conv{i}.weight"),
                init::conv_he(rng, w, w, 3),
            );
            store.insert_param(format!("head.{tower}.conv{i}.bias"), Tensor::zeros(&[w]));
        }
    }
    let prior = cfg.prior.clamp(1e-6, 1.0 - 1e-6);
    store.insert_param(
        "head.cls.out.weight",
        init::normal(rng, &[1, w, 1, 1], 0.01),
    );
    store.insert_param(
        "head.cls.out.bias",
        Tensor::full(&[1], T::from_f64_lossy(-((1.0 - prior) / prior).ln())),
    );
    store.insert_param(
        "head.reg.out.weight",
        init::normal(rng, &[4, w, 1, 1], 0.01),
    );
    store.insert_param("head.reg.out.bias", Tensor::ones(&[4]));
}

/// Head outputs of one level on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput<'g, T: Scalar> {
    /// `(N, 1, H, W)` logits.
    pub cls: Var<'g, T>,
    /// `(N, 4, H, W)` left/top/right/bottom distances in input pixels.
    pub reg: Var<'g, T>,
    pub stride: usize,
}

fn conv<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    name: &str,
    x: Var<'g, T>,
    pad: usize,
) -> Result<Var<'g, T>> {
    let w = ctx.param(&format!("{name}.weight"))?;
    let b = ctx.param(&format!("{name}.bias"))?;
    if w.value().shape()[1] != x.value().shape()[1] {
        return shape_err(format!("{name}: channel mismatch"));
    }
    Ok(x.conv2d(w, Some(b), Conv2dSpec::new(1, pad)))
}

/// Towers shared across levels: two 3x3 conv + ReLU, then a 1x1 projection.
pub fn head_forward<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    pyramid: &[Var<'g, T>; 4],
    strides: [usize; 4],
) -> Result<Vec<LevelOutput<'g, T>>> {
    let clamp = T::from_f64_lossy(REG_LOG_CLAMP);
    pyramid
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(l, (&f, stride))| {
            let x = conv(ctx, &format!("head.lateral{}", l + 1), f, 0)?;
            let c = conv(ctx, "head.cls.conv1", x, 1)?.relu();
            let c = conv(ctx, "head.cls.conv2", c, 1)?.relu();
            let cls = conv(ctx, "head.cls.out", c, 0)?;
            let r = conv(ctx, "head.reg.conv1", x, 1)?.relu();
            let r = conv(ctx, "head.reg.conv2", r, 1)?.relu();
            let reg = conv(ctx, "head.reg.out", r, 0)?.clamp(-clamp, clamp).exp();
            Ok(LevelOutput { cls, reg, stride })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelGeometry {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// GTs whose longer side lies in `(lo, hi]` are assigned here.
    pub size_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<LevelGeometry>,
}

impl PyramidGeometry {
    /// Size ranges `(0, 8 s1], (8 s1, 16 s1], (16 s1, 32 s1], (32 s1, inf)`.
    pub fn new(image_height: usize, image_width: usize, strides: [usize; 4]) -> Self {
        let base = 8.0 * strides[0] as f64;
        let bounds = [0.0, base, 2.0 * base, 4.0 * base, f64::INFINITY];
        let levels = strides
            .iter()
            .enumerate()
            .map(|(l, &s)| LevelGeometry {
                stride: s,
                height: image_height / s,
                width: image_width / s,
                size_range: (bounds[l], bounds[l + 1]),
            })
            .collect();
        Self {
            image_height,
            image_width,
            levels,
        }
    }

    pub fn level_for_size(&self, side: f64) -> usize {
        self.levels
            .iter()
            .position(|l| side > l.size_range.0 && side <= l.size_range.1)
            .unwrap_or(0)
    }
}

/// Centre of cell `(i, j)` at stride `s` in input pixels.
pub fn cell_center(i: usize, j: usize, s: usize) -> (f64, f64) {
    (((j as f64) + 0.5) * s as f64, ((i as f64) + 0.5) * s as f64)
}

/// Per-level training targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets<T> {
    /// `(N, 1, H, W)` with 1 at positives.
    pub cls: Tensor<T>,
    /// `(N, 4, H, W)` distances (l, t, r, b) in pixels; zero at negatives.
    pub reg: Tensor<T>,
    /// `(batch, i, j, gt index)` of every positive location.
    pub positives: Vec<(usize, usize, usize, usize)>,
    pub stride: usize,
}

impl<T: Scalar> LevelTargets<T> {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// Centre-in-box assignment with per-level size ranges. A location inside
/// several GTs takes the smallest one. A GT that received no location gets
/// the finest-level cell containing its centre.
pub fn assign_targets<T: Scalar>(
    gts: &[Vec<BBox>],
    geo: &PyramidGeometry,
) -> Result<Vec<LevelTargets<T>>> {
    let n = gts.len();
    // owner[l][b][i*w+j] = gt index
    let mut owner: Vec<Vec<Vec<Option<usize>>>> = geo
        .levels
        .iter()
        .map(|l| vec![vec![None; l.height * l.width]; n])
        .collect();
    for (b, boxes) in gts.iter().enumerate() {
        for (k, g) in boxes.iter().enumerate() {
            if g.is_degenerate() {
                return Err(Error::DegenerateBox(format!("image {b} box {k}: {g}")));
            }
        }
        let take = |slot: &mut Option<usize>, k: usize| match *slot {
            Some(o) if boxes[o].area() <= boxes[k].area() => {}
            _ => *slot = Some(k),
        };
        let mut assigned = vec![false; boxes.len()];
        for (k, g) in boxes.iter().enumerate() {
            let l = geo.level_for_size(g.width().max(g.height()));
            let lv = &geo.levels[l];
            let s = lv.stride as f64;
            let j0 = (g.x_min / s - 0.5).floor().max(0.0) as usize;
            let i0 = (g.y_min / s - 0.5).floor().max(0.0) as usize;
            let j1 = ((g.x_max / s).ceil() as usize).min(lv.width);
            let i1 = ((g.y_max / s).ceil() as usize).min(lv.height);
            for i in i0..i1 {
                for j in j0..j1 {
                    let (cx, cy) = cell_center(i, j, lv.stride);
                    if g.contains_point(cx, cy) {
                        take(&mut owner[l][b][i * lv.width + j], k);
                        assigned[k] = true;
                    }
                }
            }
        }
        for (k, g) in boxes.iter().enumerate() {
            if assigned[k] || owner.iter().any(|lv| lv[b].contains(&Some(k))) {
                continue;
            }
            let lv = &geo.levels[0];
            let (cx, cy) = g.center();
            let j = ((cx / lv.stride as f64).floor().max(0.0) as usize).min(lv.width - 1);
            let i = ((cy / lv.stride as f64).floor().max(0.0) as usize).min(lv.height - 1);
            take(&mut owner[0][b][i * lv.width + j], k);
        }
    }
    let mut out = Vec::with_capacity(geo.levels.len());
    for (l, lv) in geo.levels.iter().enumerate() {
        let hw = lv.height * lv.width;
        let mut cls = Tensor::zeros(&[n, 1, lv.height, lv.width]);
        let mut reg = Tensor::zeros(&[n, 4, lv.height, lv.width]);
        let mut positives = Vec::new();
        for (b, boxes) in gts.iter().enumerate() {
            for p in 0..hw {
                let Some(k) = owner[l][b][p] else { continue };
                let (i, j) = (p / lv.width, p % lv.width);
                let (cx, cy) = cell_center(i, j, lv.stride);
                let g = boxes[k];
                let d = [cx - g.x_min, cy - g.y_min, g.x_max - cx, g.y_max - cy];
                cls.data_mut()[b * hw + p] = T::one();
                for (c, v) in d.iter().enumerate() {
                    reg.data_mut()[(b * 4 + c) * hw + p] = T::from_f64_lossy(v.max(0.0));
                }
                positives.push((b, i, j, k));
            }
        }
        out.push(LevelTargets {
            cls,
            reg,
            positives,
            stride: lv.stride,
        });
    }
    Ok(out)
}

/// `(L_cls, L_loc)`. `L_cls` is the BCE summed over every location and
/// divided by the positive count (at least 1). `L_loc` is the squared error
/// of the four stride-normalised distances, summed per location and averaged
/// over positive locations (0 without positives).
pub fn detection_loss<'g, T: Scalar>(
    outputs: &[LevelOutput<'g, T>],
    targets: &[LevelTargets<T>],
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return shape_err("outputs and targets differ in level count");
    }
    let g = outputs[0].cls.graph();
    let npos: usize = targets.iter().map(|t| t.num_positive()).sum();
    let norm = T::one() / T::from_usize(npos.max(1)).unwrap();
    let mut cls_sum: Option<Var<'g, T>> = None;
    let mut loc_sum: Option<Var<'g, T>> = None;
    for (o, t) in outputs.iter().zip(targets) {
        if o.cls.value().shape() != t.cls.shape() || o.reg.value().shape() != t.reg.shape() {
            return shape_err("head output does not match target geometry");
        }
        let c = o.cls.bce_with_logits_sum(&t.cls);
        cls_sum = Some(cls_sum.map_or(c, |a| a.add(c)));
        if t.positives.is_empty() {
            continue;
        }
        let (_, _, h, w) = t.reg.dims4();
        let hw = h * w;
        let mut idx = Vec::with_capacity(4 * t.positives.len());
        for &(b, i, j, _) in &t.positives {
            for ch in 0..4 {
                idx.push((b * 4 + ch) * hw + i * w + j);
            }
        }
        let tgt: Vec<T> = idx.iter().map(|&q| t.reg.data()[q]).collect();
        let inv_s = T::one() / T::from_usize(o.stride).unwrap();
        let diff = o
            .reg
            .gather_flat(&idx)
            .sub(g.constant(Tensor::new(&[idx.len()], tgt)))
            .scale(inv_s);
        let l = diff.square().sum();
        loc_sum = Some(loc_sum.map_or(l, |a| a.add(l)));
    }
    let l_cls = cls_sum.expect("at least one level").scale(norm);
    let l_loc = match loc_sum {
        Some(v) => v.scale(norm),
        None => g.scalar(T::zero()),
    };
    Ok((l_cls, l_loc))
}

/// Plain head maps of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps<T> {
    pub cls: Tensor<T>,
    pub reg: Tensor<T>,
    pub stride: usize,
}

pub fn level_maps<T: Scalar>(outputs: &[LevelOutput<'_, T>]) -> Vec<LevelMaps<T>> {
    outputs
        .iter()
        .map(|o| LevelMaps {
            cls: (*o.cls.value()).clone(),
            reg: (*o.reg.value()).clone(),
            stride: o.stride,
        })
        .collect()
}

/// Locations with `sigmoid(cls) > score_thresh` decoded to `centre +- distance`
/// boxes clipped to the image; boxes that clip to nothing are dropped.
pub fn decode_detections<T: Scalar>(
    maps: &[LevelMaps<T>],
    batch: usize,
    image_width: usize,
    image_height: usize,
    score_thresh: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (l, m) in maps.iter().enumerate() {
        let (_, _, h, w) = m.cls.dims4();
        let hw = h * w;
        for p in 0..hw {
            let score = sigmoid(m.cls.data()[batch * hw + p].to_f64_lossy());
            if score <= score_thresh {
                continue;
            }
            let (cx, cy) = cell_center(p / w, p % w, m.stride);
            let d = |c: usize| m.reg.data()[(batch * 4 + c) * hw + p].to_f64_lossy();
            let bbox = BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3))
                .clip(image_width as f64, image_height as f64);
            if bbox.is_degenerate() {
                continue;
            }
            out.push(Detection {
                bbox,
                score,
                level: l + 1,
            });
        }
    }
    out
}

/// Greedy non-maximum suppression in descending score order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, s: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, y, x + s, y + s),
            score,
            level: 1,
        }
    }

    #[test]
    fn nms_identical_and_disjoint() {
        let kept = nms(&[det(0.0, 0.0, 4.0, 0.8), det(0.0, 0.0, 4.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms(&[det(0.0, 0.0, 4.0, 0.8), det(10.0, 0.0, 4.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn single_hot_location_decodes() {
        // stride 8, cell (7, 7) has centre (60, 60)
        let (h, w) = (16, 16);
        let mut cls = Tensor::<f64>::full(&[1, 1, h, w], -20.0);
        cls.set(&[0, 0, 7, 7], 5.0);
        let reg = Tensor::<f64>::full(&[1, 4, h, w], 4.0);
        let maps = [LevelMaps {
            cls,
            reg,
            stride: 8,
        }];
        let d = decode_detections(&maps, 0, 128, 128, 0.05);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BBox::new(56.0, 56.0, 64.0, 64.0));

        let cold = LevelMaps {
            cls: Tensor::<f64>::full(&[1, 1, h, w], -20.0),
            reg: Tensor::full(&[1, 4, h, w], 4.0),
            stride: 8,
        };
        assert!(decode_detections(&[cold], 0, 128, 128, 0.05).is_empty());
    }

    #[test]
    fn centred_8x8_gt_on_stride_2() {
        let geo = PyramidGeometry::new(64, 64, [2, 4, 8, 16]);
        // cell (10, 10) at stride 2 is centred on (21, 21)
        let gt = BBox::new(17.0, 17.0, 25.0, 25.0);
        let t = assign_targets::<f64>(&[vec![gt]], &geo).unwrap();
        assert!(t[0].positives.contains(&(0, 10, 10, 0)));
        let d: Vec<f64> = (0..4).map(|c| t[0].reg.at(&[0, c, 10, 10])).collect();
        assert_eq!(d, vec![4.0, 4.0, 4.0, 4.0]);
        assert!(t[1..].iter().all(|l| l.positives.is_empty()));
    }

    #[test]
    fn empty_and_degenerate_gts() {
        let geo = PyramidGeometry::new(32, 32, [2, 4, 8, 16]);
        let t = assign_targets::<f32>(&[vec![]], &geo).unwrap();
        assert!(t
            .iter()
            .all(|l| l.positives.is_empty() && l.cls.sum() == 0.0));
        let bad = assign_targets::<f32>(&[vec![BBox::new(3.0, 3.0, 3.0, 9.0)]], &geo);
        assert!(matches!(bad, Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn size_ranges() {
        let geo = PyramidGeometry::new(256, 256, [2, 4, 8, 16]);
        assert_eq!(geo.level_for_size(5.0), 0);
        assert_eq!(geo.level_for_size(16.0), 0);
        assert_eq!(geo.level_for_size(16.5), 1);
        assert_eq!(geo.level_for_size(64.0), 2);
        assert_eq!(geo.level_for_size(200.0), 3);
    }
}
