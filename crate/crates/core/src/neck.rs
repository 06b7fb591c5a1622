//! Aggregation-and-refinement fusion neck.
//!
//! TBSG: `F_bkg = CR(cat[F3, up(F4)])`, then `F2 - up(proj(F_bkg))` and
//! `F1 - up(proj(F_bkg))`. BOSE: `F_tgt = DSR(F2 + down(F1))`, then
//! `F3 * down(F_tgt)` and `F4 * down(F_tgt)`. Both halves read the
//! unmodified backbone pyramid.

use ccdnet_autograd::{Conv2dSpec, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::init;
use crate::params::{Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckConfig {
    /// Bottleneck reduction of the channel-refinement gate.
    pub se_reduction: usize,
    /// Hidden width multiplier of the DSR feed-forward block.
    pub ffn_expansion: usize,
    /// Modulated deformable 3x3 in DSR; `false` substitutes a dilated 3x3.
    pub deformable: bool,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            se_reduction: 4,
            ffn_expansion: 2,
            deformable: true,
        }
    }
}

/// Channel counts `[c1, c2, c3, c4]` the neck is built for.
pub type Widths = [usize; 4];

fn kk() -> usize {
    9
}

pub fn init_neck<T: Scalar>(
    cfg: &NeckConfig,
    c: Widths,
    rng: &mut impl Rng,
    store: &mut ParamStore<T>,
) {
    let c34 = c[2] + c[3];
    let hid = (c34 / cfg.se_reduction.max(1)).max(1);
    let zeros = |n: usize| Tensor::<T>::zeros(&[n]);
    store.insert_param("neck.cr.fc1.weight", init::linear_lecun(rng, hid, c34));
    store.insert_param("neck.cr.fc1.bias", zeros(hid));
    store.insert_param("neck.cr.fc2.weight", init::linear_lecun(rng, c34, hid));
    store.insert_param("neck.cr.fc2.bias", zeros(c34));
    store.insert_param(
        "neck.tbsg.proj2.weight",
        init::conv_lecun(rng, c[1], c34, 1),
    );
    store.insert_param("neck.tbsg.proj2.bias", zeros(c[1]));
    store.insert_param(
        "neck.tbsg.proj1.weight",
        init::conv_lecun(rng, c[0], c34, 1),
    );
    store.insert_param("neck.tbsg.proj1.bias", zeros(c[0]));
    store.insert_param(
        "neck.bose.down1.weight",
        init::conv_lecun(rng, c[1], c[0], 3),
    );
    store.insert_param("neck.bose.down1.bias", zeros(c[1]));
    // zero offsets and a 0.5 modulation at start, as usual for DCNv2
    store.insert_param(
        "neck.dsr.offset.weight",
        Tensor::zeros(&[3 * kk(), c[1], 3, 3]),
    );
    store.insert_param("neck.dsr.offset.bias", zeros(3 * kk()));
    store.insert_param("neck.dsr.conv.weight", init::conv_he(rng, c[1], c[1], 3));
    store.insert_param("neck.dsr.conv.bias", zeros(c[1]));
    let e = cfg.ffn_expansion.max(1) * c[1];
    store.insert_param("neck.dsr.ffn1.weight", init::conv_he(rng, e, c[1], 1));
    store.insert_param("neck.dsr.ffn1.bias", zeros(e));
    store.insert_param("neck.dsr.ffn2.weight", init::conv_lecun(rng, c[1], e, 1));
    store.insert_param("neck.dsr.ffn2.bias", zeros(c[1]));
    // the gates start close to the multiplicative identity
    store.insert_param(
        "neck.bose.proj3.weight",
        init::normal(rng, &[c[2], c[1], 3, 3], 0.01),
    );
    store.insert_param("neck.bose.proj3.bias", Tensor::ones(&[c[2]]));
    store.insert_param(
        "neck.bose.proj4.weight",
        init::normal(rng, &[c[3], c[1], 3, 3], 0.01),
    );
    store.insert_param("neck.bose.proj4.bias", Tensor::ones(&[c[3]]));
}

fn conv<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    name: &str,
    x: Var<'g, T>,
    spec: Conv2dSpec,
) -> Result<Var<'g, T>> {
    let w = ctx.param(&format!("{name}.weight"))?;
    let b = ctx.param(&format!("{name}.bias"))?;
    let (wc, xc) = (w.value().shape()[1], x.value().shape()[1]);
    if wc != xc {
        return shape_err(format!(
            "{name}: input has {xc} channels, kernel expects {wc}"
        ));
    }
    Ok(x.conv2d(w, Some(b), spec))
}

fn dims<T: Scalar>(v: Var<'_, T>) -> (usize, usize, usize, usize) {
    v.value().dims4()
}

/// Checks that F1..F4 are 2x-spaced with matching batch sizes.
pub fn check_pyramid<T: Scalar>(p: &[Var<'_, T>; 4]) -> Result<()> {
    for i in 0..3 {
        let (n0, _, h0, w0) = dims(p[i]);
        let (n1, _, h1, w1) = dims(p[i + 1]);
        if n0 != n1 || h0 != 2 * h1 || w0 != 2 * w1 {
            return shape_err(format!(
                "pyramid level {} is {h0}x{w0}, level {} is {h1}x{w1}",
                i + 1,
                i + 2
            ));
        }
    }
    Ok(())
}

/// Squeeze-excitation gate: `F * sigmoid(W2 relu(W1 gap(F)))`.
pub fn channel_refine<'g, T: Scalar>(ctx: &Ctx<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let (n, c, _, _) = dims(f);
    let w1 = ctx.param("neck.cr.fc1.weight")?;
    if w1.value().shape()[1] != c {
        return shape_err(format!(
            "channel refinement expects {} channels, got {c}",
            w1.value().shape()[1]
        ));
    }
    let s = f.mean_to(&[n, c, 1, 1]).reshape(&[n, c]);
    let h = s.linear(w1, Some(ctx.param("neck.cr.fc1.bias")?)).relu();
    let gate = h
        .linear(
            ctx.param("neck.cr.fc2.weight")?,
            Some(ctx.param("neck.cr.fc2.bias")?),
        )
        .sigmoid()
        .reshape(&[n, c, 1, 1]);
    Ok(f.mul(gate))
}

/// Top-down background guidance; returns `(F1_out, F2_out)`.
pub fn tbsg<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    p: &[Var<'g, T>; 4],
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    check_pyramid(p)?;
    let (_, _, h1, w1) = dims(p[0]);
    let (_, _, h2, w2) = dims(p[1]);
    let (_, _, h3, w3) = dims(p[2]);
    let up4 = p[3].resize_bilinear(h3, w3);
    let bkg = channel_refine(ctx, ctx.graph.concat(&[p[2], up4], 1))?;
    let pw = Conv2dSpec::new(1, 0);
    let to2 = conv(ctx, "neck.tbsg.proj2", bkg, pw)?.resize_bilinear(h2, w2);
    let to1 = conv(ctx, "neck.tbsg.proj1", bkg, pw)?.resize_bilinear(h1, w1);
    if dims(to2) != dims(p[1]) || dims(to1) != dims(p[0]) {
        return shape_err("background projection does not match F1/F2");
    }
    Ok((p[0].sub(to1), p[1].sub(to2)))
}

/// Spatial softmax per channel, rescaled so each channel's weights average 1.
pub fn spatial_weight<'g, T: Scalar>(logits: Var<'g, T>) -> Var<'g, T> {
    let (n, c, h, w) = dims(logits);
    logits
        .reshape(&[n, c, h * w])
        .softmax_last()
        .scale(T::from_usize(h * w).unwrap())
        .reshape(&[n, c, h, w])
}

/// Dynamic spatial refinement `DSR(F) = weight(F) * F`.
pub fn dynamic_spatial_refine<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    cfg: &NeckConfig,
    f: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let d = if cfg.deformable {
        let om = conv(ctx, "neck.dsr.offset", f, Conv2dSpec::new(1, 1))?;
        let off = om.narrow(1, 0, 2 * kk());
        let mask = om.narrow(1, 2 * kk(), kk()).sigmoid();
        let w = ctx.param("neck.dsr.conv.weight")?;
        let b = ctx.param("neck.dsr.conv.bias")?;
        f.deform_conv2d(off, mask, w, Some(b), Conv2dSpec::new(1, 1))
    } else {
        let spec = Conv2dSpec {
            stride: 1,
            pad: 2,
            dilation: 2,
        };
        conv(ctx, "neck.dsr.conv", f, spec)?
    };
    let pw = Conv2dSpec::new(1, 0);
    let hidden = conv(ctx, "neck.dsr.ffn1", d, pw)?.relu();
    let logits = conv(ctx, "neck.dsr.ffn2", hidden, pw)?;
    Ok(spatial_weight(logits).mul(f))
}

/// Bottom-up structure enhancement; returns `(F3_out, F4_out)`.
pub fn bose<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    cfg: &NeckConfig,
    p: &[Var<'g, T>; 4],
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    check_pyramid(p)?;
    let down1 = conv(ctx, "neck.bose.down1", p[0], Conv2dSpec::new(2, 1))?;
    let tgt = dynamic_spatial_refine(ctx, cfg, p[1].add(down1))?;
    let g3 = conv(ctx, "neck.bose.proj3", tgt, Conv2dSpec::new(2, 1))?;
    let g4 = conv(ctx, "neck.bose.proj4", tgt, Conv2dSpec::new(4, 1))?;
    if dims(g3) != dims(p[2]) || dims(g4) != dims(p[3]) {
        return shape_err("target projection does not match F3/F4");
    }
    Ok((p[2].mul(g3), p[3].mul(g4)))
}

pub fn arfn_forward<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    cfg: &NeckConfig,
    p: &[Var<'g, T>; 4],
) -> Result<[Var<'g, T>; 4]> {
    let (f1, f2) = tbsg(ctx, p)?;
    let (f3, f4) = bose(ctx, cfg, p)?;
    Ok([f1, f2, f3, f4])
}
