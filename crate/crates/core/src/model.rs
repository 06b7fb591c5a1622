//! The full detector: backbone, neck and heads over one parameter store.

use std::time::Instant;

use ccdnet_autograd::{profile, Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, wmp, BackboneConfig};
use crate::cadd::{self, CaddConfig};
use crate::data::Detection;
use crate::error::{Error, Result};
use crate::head::{self, decode_detections, level_maps, nms, HeadConfig, LevelMaps, LevelOutput};
use crate::neck::{self, NeckConfig};
use crate::params::{BnMode, Ctx, ParamStore};

pub const CADD_PREFIX: &str = "cadd.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub head: HeadConfig,
    pub cadd: CaddConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head.width == 0 || !(self.head.prior > 0.0 && self.head.prior < 1.0) {
            return Err(Error::Config(format!(
                "invalid head config {:?}",
                self.head
            )));
        }
        if self.neck.se_reduction == 0 || self.neck.ffn_expansion == 0 {
            return Err(Error::Config(format!(
                "invalid neck config {:?}",
                self.neck
            )));
        }
        if self.cadd.mlp_hidden == 0 || self.cadd.embed_dim == 0 || self.cadd.roi_grid == 0 {
            return Err(Error::Config(format!(
                "invalid cadd config {:?}",
                self.cadd
            )));
        }
        Ok(())
    }

    pub fn strides(&self) -> [usize; 4] {
        self.backbone.strides()
    }

    pub fn widths(&self) -> [usize; 4] {
        self.backbone.stage_channels
    }
}

/// Fresh training-mode parameters (including the CaDD ones) from `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let widths = cfg.widths();
    backbone::init_backbone(&cfg.backbone, &mut rng, &mut store);
    neck::init_neck(&cfg.neck, widths, &mut rng, &mut store);
    head::init_head(&cfg.head, widths, &mut rng, &mut store);
    cadd::init_cadd(&cfg.cadd, widths, &mut rng, &mut store);
    Ok(store)
}

pub struct ForwardOutput<'g, T: Scalar> {
    pub backbone: [Var<'g, T>; 4],
    pub neck: [Var<'g, T>; 4],
    pub head: Vec<LevelOutput<'g, T>>,
}

pub fn forward<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    cfg: &ModelConfig,
    x: Var<'g, T>,
) -> Result<ForwardOutput<'g, T>> {
    let b = backbone::backbone_forward(ctx, &cfg.backbone, x)?;
    let n = neck::arfn_forward(ctx, &cfg.neck, &b)?;
    let h = head::head_forward(ctx, &n, cfg.strides())?;
    Ok(ForwardOutput {
        backbone: b,
        neck: n,
        head: h,
    })
}

/// Inference-mode head maps for a `(N, 1, H, W)` batch.
pub fn infer<T: Scalar>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    images: &Tensor<T>,
) -> Result<Vec<LevelMaps<T>>> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, BnMode::Running);
    let out = forward(&ctx, cfg, g.constant(images.clone()))?;
    Ok(level_maps(&out.head))
}

/// Decoded, NMS-filtered detections per batch item.
pub fn detect<T: Scalar>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let (n, _, h, w) = images.dims4();
    let maps = infer(cfg, store, images)?;
    Ok((0..n)
        .map(|b| nms(&decode_detections(&maps, b, w, h, score_thresh), nms_iou))
        .collect())
}

pub fn is_fused<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> bool {
    backbone::is_fused(&cfg.backbone, store)
}

/// Inference store: every WMP collapsed to one 3x3 conv, CaDD removed.
pub fn fuse_model<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = if is_fused(cfg, store) {
        store.clone()
    } else {
        backbone::fuse_backbone(&cfg.backbone, store)?
    };
    out.remove_prefix(CADD_PREFIX);
    Ok(out)
}

/// [`fuse_model`] for a stored `f32` model, with the folding done in `f64`
/// and only the resulting kernels rounded.
pub fn fuse_f32(cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    Ok(fuse_model(cfg, &store.cast::<f64>())?.cast::<f32>())
}

/// Names accepted by [`named_feature`].
pub fn feature_names() -> Vec<String> {
    let mut v = Vec::new();
    for l in 1..=4 {
        v.push(format!("backbone.f{l}"));
    }
    for l in 1..=4 {
        v.push(format!("neck.p{l}"));
    }
    for l in 1..=4 {
        v.push(format!("head.cls{l}"));
    }
    v
}

/// One intermediate map of a forward pass, looked up by name.
pub fn named_feature<T: Scalar>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    name: &str,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, BnMode::Running);
    let out = forward(&ctx, cfg, g.constant(images.clone()))?;
    let pick = |prefix: &str| -> Option<usize> {
        name.strip_prefix(prefix)
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|l| (1..=4).contains(l))
            .map(|l| l - 1)
    };
    let v = if let Some(l) = pick("backbone.f") {
        out.backbone[l]
    } else if let Some(l) = pick("neck.p") {
        out.neck[l]
    } else if let Some(l) = pick("head.cls") {
        out.head[l].cls
    } else {
        return Err(Error::Config(format!(
            "unknown feature {name:?}; valid names: {}",
            feature_names().join(", ")
        )));
    };
    Ok((*v.value()).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDeviation {
    pub name: String,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub blocks: Vec<BlockDeviation>,
    /// Max deviation over all head outputs on random images.
    pub end_to_end: f64,
}

impl FusionReport {
    pub fn max_block(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_abs).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_block() <= tol && self.end_to_end <= tol
    }
}

fn head_deviation<T: Scalar>(a: &[LevelMaps<T>], b: &[LevelMaps<T>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.cls
                .max_abs_diff(&y.cls)
                .to_f64_lossy()
                .max(x.reg.max_abs_diff(&y.reg).to_f64_lossy())
        })
        .fold(0.0, f64::max)
}

/// Spatial size of the random per-block probe inputs.
const BLOCK_PROBE: usize = 8;

/// Compares each block (on random probes) and the whole network (on random
/// `size x size` images) before and after fusion.
pub fn verify_fusion<T: Scalar>(
    cfg: &ModelConfig,
    unfused: &ParamStore<T>,
    fused: &ParamStore<T>,
    size: usize,
    seed: u64,
) -> Result<FusionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for b in cfg.backbone.blocks() {
        let train = wmp::WmpBlockParams::read_from(unfused, &b.name, b.in_ch, b.out_ch, b.stride)?;
        let x: Tensor<T> =
            crate::init::normal(&mut rng, &[1, b.in_ch, BLOCK_PROBE, BLOCK_PROBE], 1.0);
        let want = wmp::wmp_forward_train(&x, &train)?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, fused, BnMode::Running);
        let got =
            wmp::wmp_block(&ctx, &b.name, g.constant(x), b.in_ch, b.out_ch, b.stride)?.value();
        blocks.push(BlockDeviation {
            name: b.name.clone(),
            max_abs: want.max_abs_diff(&got).to_f64_lossy(),
        });
    }
    let img: Tensor<T> = crate::init::uniform(
        &mut rng,
        &[2, cfg.backbone.in_channels, size, size],
        0.0,
        1.0,
    );
    let end_to_end = head_deviation(&infer(cfg, unfused, &img)?, &infer(cfg, fused, &img)?);
    Ok(FusionReport { blocks, end_to_end })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    /// Learnable scalars of the detector (CaDD excluded).
    pub params: usize,
    /// Multiply-accumulates of one forward of a single image.
    pub macs: u64,
    pub fps: f64,
    pub input: (usize, usize),
    pub fused: bool,
}

impl ComplexityReport {
    pub fn key_values(&self) -> String {
        format!(
            "mode={}\ninput={}x{}\nparams={}\nmacs={}\nflops={}\nfps={:.2}\n",
            if self.fused { "fused" } else { "train" },
            self.input.0,
            self.input.1,
            self.params,
            self.macs,
            2 * self.macs,
            self.fps
        )
    }
}

pub fn param_count<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.trainable_count(&[CADD_PREFIX])
}

/// Parameter count, MACs of one `h x w` forward, and the median throughput
/// over `runs` timed forwards after `warmup` untimed ones.
pub fn complexity_report<T: Scalar>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    h: usize,
    w: usize,
    warmup: usize,
    runs: usize,
) -> Result<ComplexityReport> {
    let x = Tensor::<T>::zeros(&[1, cfg.backbone.in_channels, h, w]);
    profile::reset_macs();
    infer(cfg, store, &x)?;
    let macs = profile::macs();
    for _ in 0..warmup {
        infer(cfg, store, &x)?;
    }
    let mut times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            infer(cfg, store, &x).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Ok(ComplexityReport {
        params: param_count(store),
        macs,
        fps: if median > 0.0 {
            1.0 / median
        } else {
            f64::INFINITY
        },
        input: (h, w),
        fused: is_fused(cfg, store),
    })
}
