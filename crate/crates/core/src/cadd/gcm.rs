//! Global contrast between confident detections and mid-confidence
//! distractors mined from the current predictions.

use ccdnet_autograd::{Graph, Roi, Scalar, Tensor, Var};

use super::instrument;
use super::LossWeights;
use crate::data::{BBox, Detection};
use crate::error::{shape_err, Result};
use crate::head::{decode_detections, nms, LevelMaps};
use crate::params::{BnMode, Ctx, ParamStore};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Positive,
    Negative,
    Ignored,
}

/// `conf > t1` positive, `t2 < conf <= t1` negative, otherwise ignored.
pub fn label(conf: f64, w: &LossWeights) -> Role {
    if conf > w.t1 {
        Role::Positive
    } else if conf > w.t2 {
        Role::Negative
    } else {
        Role::Ignored
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSample {
    pub detection: Detection,
    pub role: Role,
    pub batch: usize,
    /// Pyramid level (0-based) the vector was pooled from.
    pub level: usize,
    /// Unit-length calibrated feature, empty until calibrated.
    pub v: Vec<f64>,
}

impl ContrastiveSample {
    pub fn new(detection: Detection, role: Role, batch: usize) -> Self {
        Self {
            detection,
            role,
            batch,
            level: 0,
            v: Vec::new(),
        }
    }
}

pub fn assign_contrastive_labels(dets: &[Detection], w: &LossWeights) -> Vec<ContrastiveSample> {
    dets.iter()
        .map(|d| ContrastiveSample::new(*d, label(d.score, w), 0))
        .collect()
}

/// Samples kept for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection {
    pub positives: Vec<ContrastiveSample>,
    pub negatives: Vec<ContrastiveSample>,
    /// Ground truths stood in for missing positives.
    pub fallback: bool,
}

fn by_score_desc(v: &mut [ContrastiveSample]) {
    v.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));
}

/// Highest-scoring positive plus the `k` highest-scoring negatives. With no
/// positive, the ground truths become positives and the top `k` detections
/// that do not cover a ground truth become negatives.
pub fn select_samples(
    dets: &[Detection],
    gts: &[BBox],
    batch: usize,
    w: &LossWeights,
) -> Selection {
    let mut labelled = assign_contrastive_labels(dets, w);
    for s in &mut labelled {
        s.batch = batch;
    }
    by_score_desc(&mut labelled);
    let mut sel = Selection::default();
    if let Some(p) = labelled.iter().find(|s| s.role == Role::Positive) {
        sel.positives.push(p.clone());
        sel.negatives = labelled
            .iter()
            .filter(|s| s.role == Role::Negative)
            .take(w.k)
            .cloned()
            .collect();
    } else if !gts.is_empty() {
        sel.fallback = true;
        sel.positives = gts
            .iter()
            .filter(|g| !g.is_degenerate())
            .map(|&bbox| {
                let d = Detection {
                    bbox,
                    score: 1.0,
                    level: 0,
                };
                ContrastiveSample::new(d, Role::Positive, batch)
            })
            .collect();
        sel.negatives = labelled
            .iter()
            .filter(|s| {
                gts.iter()
                    .all(|g| g.iou(&s.detection.bbox) <= w.det_nms_iou)
            })
            .take(w.k)
            .map(|s| ContrastiveSample {
                role: Role::Negative,
                ..s.clone()
            })
            .collect();
    }
    instrument::sample_built(sel.positives.len() + sel.negatives.len());
    sel
}

/// Decodes the current head output of every image at the mining score,
/// suppresses duplicates, and selects samples per image.
pub fn mine_selections<T: Scalar>(
    maps: &[LevelMaps<T>],
    gts: &[Vec<BBox>],
    image_width: usize,
    image_height: usize,
    w: &LossWeights,
) -> Vec<Selection> {
    gts.iter()
        .enumerate()
        .map(|(b, g)| {
            let dets = nms(
                &decode_detections(maps, b, image_width, image_height, w.det_score),
                w.det_nms_iou,
            );
            select_samples(&dets, g, b, w)
        })
        .collect()
}

/// Pools each box (image pixels) on `feature` to a `grid x grid` patch,
/// projects it with `cadd.gcm.proj{level+1}` and normalises: `(S, D)`.
pub(crate) fn calibrate_graph<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    feature: Var<'g, T>,
    level: usize,
    stride: usize,
    boxes: &[(usize, BBox)],
    grid: usize,
) -> Result<Var<'g, T>> {
    let s = stride as f64;
    let rois: Vec<Roi> = boxes
        .iter()
        .map(|&(batch, b)| Roi {
            batch,
            x0: b.x_min / s,
            y0: b.y_min / s,
            x1: b.x_max / s,
            y1: b.y_max / s,
        })
        .collect();
    let c = feature.value().shape()[1];
    let pooled = feature
        .roi_align(&rois, grid, grid)
        .reshape(&[rois.len(), c * grid * grid]);
    let wgt = ctx.param(&format!("cadd.gcm.proj{}.weight", level + 1))?;
    if wgt.value().shape()[1] != c * grid * grid {
        return shape_err(format!(
            "projection expects {} inputs, got {}",
            wgt.value().shape()[1],
            c * grid * grid
        ));
    }
    let bias = ctx.param(&format!("cadd.gcm.proj{}.bias", level + 1))?;
    let v = pooled.linear(wgt, Some(bias));
    let n = v.value().shape()[0];
    let norm = v
        .square()
        .sum_to(&[n, 1])
        .add_scalar(T::from_f64_lossy(NORM_EPS))
        .sqrt();
    Ok(v.div(norm))
}

/// Contrastive loss of one level, anchors over positives only:
/// `(1/Np) sum_a sum_{p != a} [log(sum_{j in P u N} exp(s_aj)) - s_ap]`
/// with `s = v_a . v_j / tau`. Zero without a positive or a negative.
pub(crate) fn level_loss_graph<'g, T: Scalar>(
    vpos: Var<'g, T>,
    vneg: Var<'g, T>,
    tau: f64,
) -> Var<'g, T> {
    let g = vpos.graph();
    let np = vpos.value().shape()[0];
    let nn = vneg.value().shape()[0];
    if np == 0 || nn == 0 {
        return g.scalar(T::zero());
    }
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let all = g.concat(&[vpos, vneg], 0);
    let sim = vpos.matmul_t(all, false, true).scale(inv_tau);
    // similarities of unit vectors are bounded by 1/tau
    let lse = sim
        .add_scalar(-inv_tau)
        .exp()
        .sum_to(&[np, 1])
        .ln()
        .add_scalar(inv_tau);
    let m = np + nn;
    let mask = Tensor::from_fn(&[np, m], |i| {
        let (r, c) = (i / m, i % m);
        if c < np && c != r {
            T::one()
        } else {
            T::zero()
        }
    });
    let pair = sim.mul(g.constant(mask)).sum();
    let n = T::from_usize(np).unwrap();
    lse.sum().scale(n - T::one()).sub(pair).scale(T::one() / n)
}

/// Mean over pyramid levels of the level loss, with samples of the whole
/// batch pooled within each level.
pub fn gcm_loss_extended<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    features: &[Var<'g, T>; 4],
    strides: [usize; 4],
    selections: &[Selection],
    w: &LossWeights,
    grid: usize,
) -> Result<Var<'g, T>> {
    instrument::loss_called();
    let g = ctx.graph;
    let collect = |f: fn(&Selection) -> &Vec<ContrastiveSample>| -> Vec<(usize, BBox)> {
        selections
            .iter()
            .flat_map(|s| f(s).iter())
            .filter(|s| !s.detection.bbox.is_degenerate())
            .map(|s| (s.batch, s.detection.bbox))
            .collect()
    };
    let pos = collect(|s| &s.positives);
    let neg = collect(|s| &s.negatives);
    if pos.is_empty() || neg.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let mut acc: Option<Var<'g, T>> = None;
    for (l, &f) in features.iter().enumerate() {
        let vp = calibrate_graph(ctx, f, l, strides[l], &pos, grid)?;
        let vn = calibrate_graph(ctx, f, l, strides[l], &neg, grid)?;
        let ll = level_loss_graph(vp, vn, w.tau);
        acc = Some(acc.map_or(ll, |a| a.add(ll)));
    }
    Ok(acc
        .expect("four levels")
        .scale(T::one() / T::from_usize(features.len()).unwrap()))
}

// ---- plain entry points ----

/// Fills `v` for every sample on every level; returns one copy per level.
/// Degenerate boxes are dropped.
pub fn calibrate_sample_features<T: Scalar>(
    store: &ParamStore<T>,
    features: &[Tensor<T>],
    strides: &[usize],
    samples: &[ContrastiveSample],
    grid: usize,
) -> Result<Vec<Vec<ContrastiveSample>>> {
    let kept: Vec<&ContrastiveSample> = samples
        .iter()
        .filter(|s| !s.detection.bbox.is_degenerate())
        .collect();
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, BnMode::Running);
    let mut out = Vec::with_capacity(features.len());
    for (l, f) in features.iter().enumerate() {
        if kept.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let boxes: Vec<(usize, BBox)> = kept.iter().map(|s| (s.batch, s.detection.bbox)).collect();
        let v = calibrate_graph(&ctx, g.constant(f.clone()), l, strides[l], &boxes, grid)?.value();
        let d = v.shape()[1];
        let data = v.to_f64_vec();
        out.push(
            kept.iter()
                .enumerate()
                .map(|(i, s)| ContrastiveSample {
                    level: l,
                    v: data[i * d..(i + 1) * d].to_vec(),
                    ..(*s).clone()
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Level loss from calibrated samples of one level; roles pick the sets.
pub fn gcm_loss(samples: &[ContrastiveSample], tau: f64) -> Result<f64> {
    let rows = |role: Role| -> Vec<&Vec<f64>> {
        samples
            .iter()
            .filter(|s| s.role == role)
            .map(|s| &s.v)
            .collect()
    };
    let (p, n) = (rows(Role::Positive), rows(Role::Negative));
    if p.is_empty() || n.is_empty() {
        return Ok(0.0);
    }
    let d = p[0].len();
    if d == 0 || p.iter().chain(&n).any(|v| v.len() != d) {
        return shape_err("gcm_loss needs calibrated vectors of one length");
    }
    if samples
        .iter()
        .any(|s| s.role != Role::Ignored && s.level != samples[0].level)
    {
        return shape_err("gcm_loss samples must come from a single level");
    }
    let mat = |r: &[&Vec<f64>]| {
        Tensor::<f64>::from_f64(
            &[r.len(), d],
            &r.iter().flat_map(|v| v.iter().copied()).collect::<Vec<_>>(),
        )
    };
    let g = Graph::inference();
    Ok(level_loss_graph(g.constant(mat(&p)), g.constant(mat(&n)), tau).item())
}
