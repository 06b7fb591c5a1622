//! Training-only contrastive losses: the local nine-region contrast (LCM)
//! and the detection-mined global contrast (GCM), plus the total loss.

pub mod gcm;
pub mod instrument;
pub mod lcm;

use ccdnet_autograd::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::params::ParamStore;

pub use gcm::{
    assign_contrastive_labels, calibrate_sample_features, gcm_loss, gcm_loss_extended, label,
    mine_selections, select_samples, ContrastiveSample, Role, Selection,
};
pub use lcm::{
    difference_vectors, extract_nine_regions, lcm_loss, lcm_loss_extended, lcm_reweight,
    map_to_level, region_stats, NineRegionPatch, RegionStats,
};

/// Loss weights and sampling thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub t1: f64,
    pub t2: f64,
    pub k: usize,
    /// Neighbour regions overlapping another GT above this IoU are ignored.
    pub neighbor_iou: f64,
    /// Detections below this score are not mined for contrastive samples.
    pub det_score: f64,
    /// NMS threshold applied to mined detections.
    pub det_nms_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            tau: 0.1,
            t1: 0.8,
            t2: 0.2,
            k: 3,
            neighbor_iou: 0.3,
            det_score: 0.05,
            det_nms_iou: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && 0.0 <= self.t2
            && self.t2 < self.t1
            && self.t1 <= 1.0
            && self.tau > 0.0
            && self.k >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Structural sizes of the CaDD parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaddConfig {
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub roi_grid: usize,
}

impl Default for CaddConfig {
    fn default() -> Self {
        Self {
            mlp_hidden: 32,
            embed_dim: 64,
            roi_grid: 3,
        }
    }
}

pub fn init_cadd<T: Scalar>(
    cfg: &CaddConfig,
    channels: [usize; 4],
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) {
    let h = cfg.mlp_hidden;
    let dims = [(h, 9), (h, h), (9, h)];
    for (i, &(o, inp)) in dims.iter().enumerate() {
        store.insert_param(
            format!("cadd.lcm.fc{}.weight", i + 1),
            init::linear_lecun(rng, o, inp),
        );
        store.insert_param(format!("cadd.lcm.fc{}.bias", i + 1), Tensor::zeros(&[o]));
    }
    let g2 = cfg.roi_grid * cfg.roi_grid;
    for (l, &c) in channels.iter().enumerate() {
        store.insert_param(
            format!("cadd.gcm.proj{}.weight", l + 1),
            init::linear_lecun(rng, cfg.embed_dim, c * g2),
        );
        store.insert_param(
            format!("cadd.gcm.proj{}.bias", l + 1),
            Tensor::zeros(&[cfg.embed_dim]),
        );
    }
}

/// `L = L_cls + L_loc + alpha L_LCM + beta L_GCM`; a non-finite component
/// aborts with its name.
pub fn total_loss(l_cls: f64, l_loc: f64, l_lcm: f64, l_gcm: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("L_cls", l_cls),
        ("L_loc", l_loc),
        ("L_lcm", l_lcm),
        ("L_gcm", l_gcm),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(l_cls + l_loc + w.alpha * l_lcm + w.beta * l_gcm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 0.0, 0.0, &w).unwrap(), 2.0);
        assert!((total_loss(0.0, 0.0, 10.0, 20.0, &w).unwrap() - 2.0).abs() < 1e-12);
        let e = total_loss(0.0, f64::NAN, 0.0, 0.0, &w).unwrap_err();
        assert!(e.to_string().contains("L_loc"));
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            t2: 0.9,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
