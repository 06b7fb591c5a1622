//! Four-stage WMP backbone.

pub mod wmp;

use ccdnet_autograd::{Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{Ctx, ParamStore};
pub use wmp::{
    branch_layout, fold_conv_bn, fuse_branch_scalar, fuse_wmp, merge_branches, pad_to_3x3,
    wmp_forward_fused, wmp_forward_train, wmp_fused_preactivation, wmp_preactivation, BnStats,
    BranchKernel, BranchKind, BranchParams, FusedConv, WmpBlockParams,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    /// Downsampling of the stem; a power of two. Each factor of two is one
    /// stride-2 block.
    pub stem_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_depths: [1, 2, 2, 1],
            stage_channels: [16, 32, 64, 128],
            stem_stride: 2,
        }
    }
}

/// Position of one block in the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Stage index (0..4) when the block ends a stage.
    pub ends_stage: Option<usize>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.stage_depths.contains(&0)
            || self.stage_channels.contains(&0)
        {
            return Err(Error::Config(
                "backbone depths and widths must be positive".into(),
            ));
        }
        if self.stem_stride == 0 || !self.stem_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "stem_stride {} is not a power of two",
                self.stem_stride
            )));
        }
        Ok(())
    }

    /// Strides of F1..F4 relative to the input.
    pub fn strides(&self) -> [usize; 4] {
        let s = self.stem_stride;
        [s, 2 * s, 4 * s, 8 * s]
    }

    /// Input sides must be divisible by `8 * stem_stride`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = 8 * self.stem_stride;
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return shape_err(format!("input {h}x{w} is not divisible by {d}"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let c1 = self.stage_channels[0];
        let stem_blocks = (self.stem_stride.trailing_zeros() as usize).max(1);
        let mut cin = self.in_channels;
        for i in 0..stem_blocks {
            out.push(BlockSpec {
                name: format!("backbone.stem.{i}"),
                in_ch: cin,
                out_ch: c1,
                stride: if self.stem_stride > 1 { 2 } else { 1 },
                ends_stage: None,
            });
            cin = c1;
        }
        for s in 0..4 {
            let c = self.stage_channels[s];
            for j in 0..self.stage_depths[s] {
                out.push(BlockSpec {
                    name: format!("backbone.stage{}.{j}", s + 1),
                    in_ch: cin,
                    out_ch: c,
                    stride: if s > 0 && j == 0 { 2 } else { 1 },
                    ends_stage: (j + 1 == self.stage_depths[s]).then_some(s),
                });
                cin = c;
            }
        }
        out
    }
}

pub fn init_backbone<T: Scalar>(
    cfg: &BackboneConfig,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) {
    for b in cfg.blocks() {
        WmpBlockParams::<T>::init(rng, b.in_ch, b.out_ch, b.stride).write_to(store, &b.name);
    }
}

/// True when every backbone block in the store carries a fused kernel.
pub fn is_fused<T: Scalar>(cfg: &BackboneConfig, store: &ParamStore<T>) -> bool {
    cfg.blocks()
        .iter()
        .all(|b| store.contains(&format!("{}.fused.weight", b.name)))
}

/// Runs the backbone and returns F1..F4. Fused blocks are used where the
/// store holds them.
pub fn backbone_forward<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    cfg: &BackboneConfig,
    x: Var<'g, T>,
) -> Result<[Var<'g, T>; 4]> {
    let shape = x.value().shape().to_vec();
    if shape.len() != 4 {
        return shape_err(format!("expected NCHW input, got {shape:?}"));
    }
    cfg.check_input(shape[2], shape[3])?;
    let mut h = x;
    let mut outs: Vec<Var<'g, T>> = Vec::with_capacity(4);
    for b in cfg.blocks() {
        h = wmp::wmp_block(ctx, &b.name, h, b.in_ch, b.out_ch, b.stride)?;
        if b.ends_stage.is_some() {
            outs.push(h);
        }
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

/// Replaces every block's branches by its fused kernel. Non-backbone
/// entries are copied unchanged. Fails on the first invalid block with its
/// path.
pub fn fuse_backbone<T: Scalar>(
    cfg: &BackboneConfig,
    store: &ParamStore<T>,
) -> Result<ParamStore<T>> {
    let mut out = store.clone();
    for b in cfg.blocks() {
        let block = WmpBlockParams::read_from(store, &b.name, b.in_ch, b.out_ch, b.stride)?;
        let fused = fuse_wmp(&block).map_err(|e| match e {
            Error::InvalidBn(m) => Error::InvalidBn(format!("{}: {m}", b.name)),
            other => other,
        })?;
        out.remove_prefix(&format!("{}.", b.name));
        fused.write_to(&mut out, &b.name);
    }
    Ok(out)
}
