//! Fused-mode evaluation over a labelled split.

use crate::config::EvalConfig;
use crate::data::{Detection, Sample};
use crate::error::{Error, Result};
use crate::metrics::{match_image, MatchReport};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::train::batch_tensor;

/// Detections per sample, in input order.
pub fn detect_all(
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    samples: &[Sample],
    ev: &EvalConfig,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ev.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = batch_tensor::<f32>(&refs)?;
        out.extend(model::detect(cfg, store, &x, ev.score_thresh, ev.nms_iou)?);
    }
    Ok(out)
}

/// Fuses an unfused store first (with a notice), then matches every image.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    samples: &[Sample],
    ev: &EvalConfig,
) -> Result<MatchReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let fused;
    let store = if model::is_fused(cfg, store) {
        store
    } else {
        log::warn!("checkpoint is in training mode; fusing before evaluation");
        fused = model::fuse_f32(cfg, store)?;
        &fused
    };
    let dets = detect_all(cfg, store, samples, ev)?;
    let mut report = MatchReport::default();
    for (s, d) in samples.iter().zip(&dets) {
        report.merge(&match_image(&s.id, d, &s.boxes, ev.criterion));
    }
    Ok(report)
}
