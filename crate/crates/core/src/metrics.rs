//! Target-level matching and precision / recall / F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "threshold")]
pub enum MatchCriterion {
    /// IoU at or above the threshold.
    Iou(f64),
    /// Detection centre inside the GT box.
    CenterHit,
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion::Iou(0.5)
    }
}

impl std::fmt::Display for MatchCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatchCriterion::Iou(t) => write!(f, "iou>={t}"),
            MatchCriterion::CenterHit => f.write_str("center-hit"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageCounts {
    pub image_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Indices into the detection and GT lists of a single-image report.
    pub pairs: Vec<MatchedPair>,
    pub per_image: Vec<ImageCounts>,
}

impl MatchReport {
    /// Adds counts and per-image rows; pairs are per-image and not merged.
    pub fn merge(&mut self, other: &MatchReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.per_image.extend(other.per_image.iter().cloned());
    }
}

/// Greedy one-to-one matching in descending score (ties keep input order):
/// each detection takes the unmatched GT of highest IoU that satisfies the
/// criterion.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BBox],
    criterion: MatchCriterion,
) -> MatchReport {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gts.len()];
    let mut report = MatchReport::default();
    for d in order {
        let db = &dets[d].bbox;
        let (cx, cy) = db.center();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let iou = db.iou(gt);
            let ok = match criterion {
                MatchCriterion::Iou(t) => iou >= t,
                MatchCriterion::CenterHit => gt.contains_point(cx, cy),
            };
            if ok && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                used[g] = true;
                report.tp += 1;
                report.pairs.push(MatchedPair { det: d, gt: g, iou });
            }
            None => report.fp += 1,
        }
    }
    report.fn_ = gts.len() - report.tp;
    report
}

/// Matching of one image with its per-image row filled.
pub fn match_image(
    image_id: &str,
    dets: &[Detection],
    gts: &[BBox],
    criterion: MatchCriterion,
) -> MatchReport {
    let mut r = match_detections(dets, gts, criterion);
    r.per_image.push(ImageCounts {
        image_id: image_id.into(),
        tp: r.tp,
        fp: r.fp,
        fn_: r.fn_,
    });
    r
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_from_pr(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `(P, R, F1)` with `0/0 = 0`.
pub fn prf1(report: &MatchReport) -> (f64, f64, f64) {
    let p = ratio(report.tp, report.tp + report.fp);
    let r = ratio(report.tp, report.tp + report.fn_);
    (p, r, f1_from_pr(p, r))
}

/// Human-readable table of the counts and rates.
pub fn format_table(report: &MatchReport, criterion: MatchCriterion) -> String {
    let (p, r, f1) = prf1(report);
    let mut s = String::new();
    let _ = writeln!(s, "+-----------+------------+");
    let _ = writeln!(s, "| criterion | {:>10} |", criterion.to_string());
    let _ = writeln!(s, "+-----------+------------+");
    for (k, v) in [("TP", report.tp), ("FP", report.fp), ("FN", report.fn_)] {
        let _ = writeln!(s, "| {k:<9} | {v:>10} |");
    }
    for (k, v) in [("precision", p), ("recall", r), ("F1", f1)] {
        let _ = writeln!(s, "| {k:<9} | {v:>10.4} |");
    }
    let _ = writeln!(s, "+-----------+------------+");
    s
}

/// `key=value` lines for scripts.
pub fn format_key_values(report: &MatchReport, criterion: MatchCriterion) -> String {
    let (p, r, f1) = prf1(report);
    format!(
        "criterion={criterion}\ntp={}\nfp={}\nfn={}\nprecision={p:.6}\nrecall={r:.6}\nf1={f1:.6}\n",
        report.tp, report.fp, report.fn_
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            score,
            level: 1,
        }
    }

    #[test]
    fn exact_and_duplicate() {
        let g = BBox::new(0.0, 0.0, 4.0, 4.0);
        let r = match_detections(&[det(g, 0.9)], &[g], MatchCriterion::default());
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
        let r = match_detections(&[det(g, 0.9), det(g, 0.8)], &[g], MatchCriterion::default());
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert_eq!(r.pairs[0].det, 0);
    }

    #[test]
    fn center_hit_accepts_loose_boxes() {
        let g = BBox::new(0.0, 0.0, 4.0, 4.0);
        let d = det(BBox::new(1.0, 1.0, 9.0, 9.0), 0.5);
        assert_eq!(
            match_detections(&[d], &[g], MatchCriterion::default()).tp,
            0
        );
        assert_eq!(
            match_detections(&[d], &[g], MatchCriterion::CenterHit).tp,
            0
        );
        let d = det(BBox::new(0.0, 0.0, 7.0, 7.0), 0.5);
        assert_eq!(
            match_detections(&[d], &[g], MatchCriterion::CenterHit).tp,
            1
        );
    }

    #[test]
    fn rates() {
        assert_eq!(prf1(&MatchReport::default()), (0.0, 0.0, 0.0));
        let r = MatchReport {
            tp: 3,
            fp: 1,
            fn_: 1,
            ..Default::default()
        };
        assert_eq!(prf1(&r), (0.75, 0.75, 0.75));
        assert!((f1_from_pr(92.89, 90.23) - 91.54).abs() < 0.01);
    }

    #[test]
    fn outputs_mention_f1() {
        let r = MatchReport {
            tp: 1,
            ..Default::default()
        };
        assert!(format_table(&r, MatchCriterion::default()).contains("F1"));
        assert!(format_key_values(&r, MatchCriterion::CenterHit).contains("f1=1.000000"));
    }
}
