//! Weighted multi-branch perceptron block and its fusion into one 3x3
//! convolution.
//!
//! Train form: `relu(sum_i p_i * BN_i(conv_i(x)))` over three branches
//! (3x3 conv, 1x1 conv, and identity or a second 1x1 conv). Fused form:
//! `relu(conv3x3(x; w') + b')`.

use ccdnet_autograd::{conv2d_forward, BatchStats, Conv2dSpec, Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::params::{BnMode, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Frozen batch-norm statistics and affine parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// `sqrt(running_var + eps)`.
    pub std: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    /// `mu = 0, sigma = 1, gamma = 1, beta = 0`.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            std: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let c = self.gamma.len();
        if self.mean.len() != c || self.std.len() != c || self.beta.len() != c {
            return shape_err(format!("{path}: BN arrays differ in length"));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        for (ch, &s) in self.std.iter().enumerate() {
            if !(s > eps) || !s.is_finite() {
                return Err(Error::InvalidBn(format!(
                    "{path} channel {ch}: sigma = {s}"
                )));
            }
        }
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !finite(&self.mean) || !finite(&self.gamma) || !finite(&self.beta) {
            return Err(Error::InvalidBn(format!("{path}: non-finite statistics")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BranchKernel<T> {
    Conv(Tensor<T>),
    /// BN applied directly to the input (stride 1, equal channels only).
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<T> {
    pub kernel: BranchKernel<T>,
    pub bn: BnStats<T>,
    pub p: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T> {
    /// `(out, in, 3, 3)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WmpBlockParams<T> {
    pub branches: Vec<BranchParams<T>>,
    pub stride: usize,
    pub fused: Option<FusedConv<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Conv3,
    Conv1,
    Identity,
}

impl BranchKind {
    pub fn kernel_size(self) -> Option<usize> {
        match self {
            BranchKind::Conv3 => Some(3),
            BranchKind::Conv1 => Some(1),
            BranchKind::Identity => None,
        }
    }
}

/// Branch structure of a block: the identity branch only exists when the
/// block keeps both resolution and width, otherwise a second 1x1 branch
/// takes its place.
pub fn branch_layout(in_ch: usize, out_ch: usize, stride: usize) -> [BranchKind; 3] {
    let third = if stride == 1 && in_ch == out_ch {
        BranchKind::Identity
    } else {
        BranchKind::Conv1
    };
    [BranchKind::Conv3, BranchKind::Conv1, third]
}

fn branch_spec(stride: usize, k: usize) -> Conv2dSpec {
    Conv2dSpec::new(stride, k / 2)
}

impl<T: Scalar> WmpBlockParams<T> {
    /// Training initialisation: He-normal kernels, identity BN, `p = 1`.
    pub fn init(rng: &mut impl Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let branches = branch_layout(in_ch, out_ch, stride)
            .iter()
            .map(|kind| BranchParams {
                kernel: match kind.kernel_size() {
                    Some(k) => BranchKernel::Conv(init::conv_he(rng, out_ch, in_ch, k)),
                    None => BranchKernel::Identity,
                },
                bn: BnStats::identity(out_ch),
                p: T::one(),
            })
            .collect();
        Self {
            branches,
            stride,
            fused: None,
        }
    }

    /// Fully random block (kernels, BN statistics and branch scalars), used
    /// by equivalence sweeps.
    pub fn random(rng: &mut impl Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let mut block = Self::init(rng, in_ch, out_ch, stride);
        let pick = |rng: &mut _, lo, hi| init::uniform::<T>(rng, &[out_ch], lo, hi).into_data();
        for b in &mut block.branches {
            b.bn = BnStats {
                mean: pick(rng, -0.5, 0.5),
                std: pick(rng, 0.5, 1.5),
                gamma: pick(rng, 0.5, 1.5),
                beta: pick(rng, -0.5, 0.5),
            };
            b.p = T::from_f64_lossy(rng.random_range(-1.0..1.5));
        }
        block
    }

    pub fn out_channels(&self) -> usize {
        self.branches.first().map_or(0, |b| b.bn.channels())
    }

    pub fn in_channels(&self) -> usize {
        self.branches
            .iter()
            .find_map(|b| match &b.kernel {
                BranchKernel::Conv(k) => Some(k.shape()[1]),
                BranchKernel::Identity => None,
            })
            .unwrap_or_else(|| self.out_channels())
    }

    /// Checks branch count, shape agreement and BN statistics.
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.branches.len() != 3 {
            return Err(Error::InvalidStructure(format!(
                "{path}: expected 3 branches, found {}",
                self.branches.len()
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidStructure(format!(
                "{path}: stride {}",
                self.stride
            )));
        }
        let (ci, co) = (self.in_channels(), self.out_channels());
        for (i, b) in self.branches.iter().enumerate() {
            let bpath = format!("{path}.b{i}");
            b.bn.validate(&bpath)?;
            if b.bn.channels() != co {
                return shape_err(format!(
                    "{bpath}: BN has {} channels, block has {co}",
                    b.bn.channels()
                ));
            }
            if !b.p.is_finite() {
                return Err(Error::InvalidParam(format!("{bpath}: p = {}", b.p)));
            }
            match &b.kernel {
                BranchKernel::Conv(k) => {
                    let s = k.shape();
                    if s.len() != 4
                        || s[0] != co
                        || s[1] != ci
                        || s[2] != s[3]
                        || s[2] > 3
                        || s[2] % 2 == 0
                    {
                        return shape_err(format!("{bpath}: kernel shape {s:?}"));
                    }
                }
                BranchKernel::Identity => {
                    if ci != co || self.stride != 1 {
                        return Err(Error::InvalidStructure(format!(
                            "{bpath}: identity branch needs equal channels and stride 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Folds BN into the preceding convolution:
/// `k' = (gamma / sigma) k`, `b' = beta - gamma mu / sigma`.
pub fn fold_conv_bn<T: Scalar>(kernel: &Tensor<T>, bn: &BnStats<T>) -> Result<(Tensor<T>, Vec<T>)> {
    bn.validate("fold_conv_bn")?;
    let co = kernel.shape()[0];
    if co != bn.channels() {
        return shape_err(format!(
            "kernel has {co} outputs, BN has {} channels",
            bn.channels()
        ));
    }
    let per = kernel.numel() / co;
    let mut k = kernel.clone();
    let mut bias = Vec::with_capacity(co);
    for o in 0..co {
        let s = bn.gamma[o] / bn.std[o];
        for v in &mut k.data_mut()[o * per..(o + 1) * per] {
            *v = *v * s;
        }
        bias.push(bn.beta[o] - bn.gamma[o] * bn.mean[o] / bn.std[o]);
    }
    Ok((k, bias))
}

/// Absorbs the branch scalar: `k' = p k`, `b' = p b`.
pub fn fuse_branch_scalar<T: Scalar>(
    kernel: &Tensor<T>,
    bias: &[T],
    p: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !p.is_finite() {
        return Err(Error::InvalidParam(format!("branch scalar p = {p}")));
    }
    Ok((kernel.scale(p), bias.iter().map(|&b| b * p).collect()))
}

/// Lifts a branch kernel to 3x3: 1x1 kernels go to the centre tap, the
/// identity becomes a per-channel centre delta.
pub fn pad_to_3x3<T: Scalar>(
    kernel: &BranchKernel<T>,
    in_ch: usize,
    out_ch: usize,
) -> Result<Tensor<T>> {
    match kernel {
        BranchKernel::Identity => {
            if in_ch != out_ch {
                return Err(Error::InvalidStructure(format!(
                    "identity branch with {in_ch} inputs and {out_ch} outputs"
                )));
            }
            let mut k = Tensor::zeros(&[out_ch, in_ch, 3, 3]);
            for c in 0..out_ch {
                k.set(&[c, c, 1, 1], T::one());
            }
            Ok(k)
        }
        BranchKernel::Conv(k) => {
            let (co, ci, kh, kw) = k.dims4();
            match (kh, kw) {
                (3, 3) => Ok(k.clone()),
                (1, 1) => {
                    let mut out = Tensor::zeros(&[co, ci, 3, 3]);
                    for o in 0..co {
                        for i in 0..ci {
                            out.set(&[o, i, 1, 1], k.at(&[o, i, 0, 0]));
                        }
                    }
                    Ok(out)
                }
                _ => Err(Error::InvalidStructure(format!(
                    "cannot pad a {kh}x{kw} kernel to 3x3"
                ))),
            }
        }
    }
}

/// Sums 3x3 kernels and biases into one convolution.
pub fn merge_branches<T: Scalar>(branches: &[(Tensor<T>, Vec<T>)]) -> Result<(Tensor<T>, Vec<T>)> {
    let Some((k0, b0)) = branches.first() else {
        return shape_err("merge of zero branches");
    };
    if k0.rank() != 4 || k0.shape()[2] != 3 || k0.shape()[3] != 3 {
        return shape_err(format!("merge expects 3x3 kernels, got {:?}", k0.shape()));
    }
    let mut k = k0.clone();
    let mut b = b0.clone();
    for (ki, bi) in &branches[1..] {
        if ki.shape() != k0.shape() || bi.len() != b0.len() {
            return shape_err(format!(
                "branch kernel {:?} vs {:?}",
                ki.shape(),
                k0.shape()
            ));
        }
        k.add_assign(ki);
        for (a, &x) in b.iter_mut().zip(bi) {
            *a = *a + x;
        }
    }
    Ok((k, b))
}

/// Collapses the three branches into the `fused` kernel.
pub fn fuse_wmp<T: Scalar>(params: &WmpBlockParams<T>) -> Result<WmpBlockParams<T>> {
    params.validate("wmp")?;
    let (ci, co) = (params.in_channels(), params.out_channels());
    let parts = params
        .branches
        .iter()
        .map(|b| {
            let k3 = pad_to_3x3(&b.kernel, ci, co)?;
            let (kf, bf) = fold_conv_bn(&k3, &b.bn)?;
            fuse_branch_scalar(&kf, &bf, b.p)
        })
        .collect::<Result<Vec<_>>>()?;
    let (weight, bias) = merge_branches(&parts)?;
    Ok(WmpBlockParams {
        branches: params.branches.clone(),
        stride: params.stride,
        fused: Some(FusedConv { weight, bias }),
    })
}

/// Graph handles for one branch.
pub(crate) struct BranchVars<'g, T: Scalar> {
    pub weight: Option<Var<'g, T>>,
    pub gamma: Var<'g, T>,
    pub beta: Var<'g, T>,
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
    pub p: Var<'g, T>,
}

/// `sum_i p_i * BN_i(conv_i(x))` on the tape. In [`BnMode::Batch`] the batch
/// statistics of each branch are returned alongside.
pub(crate) fn wmp_preact_graph<'g, T: Scalar>(
    x: Var<'g, T>,
    branches: &[BranchVars<'g, T>],
    stride: usize,
    bn: BnMode,
) -> (Var<'g, T>, Vec<Option<BatchStats<T>>>) {
    let g = x.graph();
    let mut acc: Option<Var<'g, T>> = None;
    let mut stats = Vec::with_capacity(branches.len());
    for b in branches {
        let y = match b.weight {
            Some(w) => {
                let k = w.value().shape()[2];
                x.conv2d(w, None, branch_spec(stride, k))
            }
            None => x,
        };
        let c = y.value().shape()[1];
        let normed = match bn {
            BnMode::Batch => {
                let (yn, s) = y.batch_norm_train(b.gamma, b.beta, T::from_f64_lossy(BN_EPS));
                stats.push(Some(s));
                yn
            }
            BnMode::Running => {
                stats.push(None);
                let scale = b.gamma.div(g.constant(b.std.clone()));
                let shift = b.beta.sub(scale.mul(g.constant(b.mean.clone())));
                y.mul(scale.reshape(&[1, c, 1, 1]))
                    .add(shift.reshape(&[1, c, 1, 1]))
            }
        };
        let term = normed.mul(b.p.reshape(&[1, 1, 1, 1]));
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term),
        });
    }
    (acc.expect("at least one branch"), stats)
}

fn check_input<T: Scalar>(x: &Tensor<T>, params: &WmpBlockParams<T>) -> Result<()> {
    if x.rank() != 4 {
        return shape_err(format!("expected NCHW input, got {:?}", x.shape()));
    }
    if x.shape()[1] != params.in_channels() {
        return shape_err(format!(
            "input has {} channels, block expects {}",
            x.shape()[1],
            params.in_channels()
        ));
    }
    Ok(())
}

/// Branch-sum output before the activation, BN with the stored statistics.
pub fn wmp_preactivation<T: Scalar>(
    x: &Tensor<T>,
    params: &WmpBlockParams<T>,
) -> Result<Tensor<T>> {
    params.validate("wmp")?;
    check_input(x, params)?;
    let g = Graph::inference();
    let vars: Vec<_> = params
        .branches
        .iter()
        .map(|b| BranchVars {
            weight: match &b.kernel {
                BranchKernel::Conv(k) => Some(g.constant(k.clone())),
                BranchKernel::Identity => None,
            },
            gamma: g.constant(Tensor::new(&[b.bn.channels()], b.bn.gamma.clone())),
            beta: g.constant(Tensor::new(&[b.bn.channels()], b.bn.beta.clone())),
            mean: Tensor::new(&[b.bn.channels()], b.bn.mean.clone()),
            std: Tensor::new(&[b.bn.channels()], b.bn.std.clone()),
            p: g.constant(Tensor::scalar(b.p)),
        })
        .collect();
    let (y, _) = wmp_preact_graph(g.constant(x.clone()), &vars, params.stride, BnMode::Running);
    let out = (*y.value()).clone();
    Ok(out)
}

/// Train-form block output `relu(sum_i p_i BN_i(conv_i(x)))`.
pub fn wmp_forward_train<T: Scalar>(
    x: &Tensor<T>,
    params: &WmpBlockParams<T>,
) -> Result<Tensor<T>> {
    Ok(wmp_preactivation(x, params)?.map(|v| v.max(T::zero())))
}

/// Fused-form output before the activation.
pub fn wmp_fused_preactivation<T: Scalar>(
    x: &Tensor<T>,
    params: &WmpBlockParams<T>,
) -> Result<Tensor<T>> {
    let Some(f) = &params.fused else {
        return Err(Error::InvalidStructure("block has not been fused".into()));
    };
    if x.rank() != 4 || x.shape()[1] != f.weight.shape()[1] {
        return shape_err(format!(
            "input {:?} vs fused kernel {:?}",
            x.shape(),
            f.weight.shape()
        ));
    }
    let bias = Tensor::new(&[f.bias.len()], f.bias.clone());
    Ok(conv2d_forward(
        x,
        &f.weight,
        Some(&bias),
        Conv2dSpec::new(params.stride, 1),
    ))
}

pub fn wmp_forward_fused<T: Scalar>(
    x: &Tensor<T>,
    params: &WmpBlockParams<T>,
) -> Result<Tensor<T>> {
    Ok(wmp_fused_preactivation(x, params)?.map(|v| v.max(T::zero())))
}

// ---- parameter store layout ----

fn bname(prefix: &str, i: usize, leaf: &str) -> String {
    format!("{prefix}.b{i}.{leaf}")
}

impl<T: Scalar> WmpBlockParams<T> {
    /// Writes the block under `prefix`. Branch entries are written when the
    /// block is unfused, fused entries otherwise.
    pub fn write_to(&self, store: &mut ParamStore<T>, prefix: &str) {
        if let Some(f) = &self.fused {
            store.insert_param(format!("{prefix}.fused.weight"), f.weight.clone());
            store.insert_param(
                format!("{prefix}.fused.bias"),
                Tensor::new(&[f.bias.len()], f.bias.clone()),
            );
            return;
        }
        for (i, b) in self.branches.iter().enumerate() {
            let c = b.bn.channels();
            if let BranchKernel::Conv(k) = &b.kernel {
                store.insert_param(bname(prefix, i, "weight"), k.clone());
            }
            store.insert_param(
                bname(prefix, i, "bn.gamma"),
                Tensor::new(&[c], b.bn.gamma.clone()),
            );
            store.insert_param(
                bname(prefix, i, "bn.beta"),
                Tensor::new(&[c], b.bn.beta.clone()),
            );
            store.insert_buffer(
                bname(prefix, i, "bn.mean"),
                Tensor::new(&[c], b.bn.mean.clone()),
            );
            store.insert_buffer(
                bname(prefix, i, "bn.std"),
                Tensor::new(&[c], b.bn.std.clone()),
            );
            store.insert_param(bname(prefix, i, "p"), Tensor::scalar(b.p));
        }
    }

    /// Reads an unfused block written by [`WmpBlockParams::write_to`].
    pub fn read_from(
        store: &ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let layout = branch_layout(in_ch, out_ch, stride);
        let mut branches = Vec::with_capacity(3);
        for (i, kind) in layout.iter().enumerate() {
            let kernel = match kind {
                BranchKind::Identity => BranchKernel::Identity,
                _ => BranchKernel::Conv(store.get(&bname(prefix, i, "weight"))?.clone()),
            };
            let vec = |leaf: &str| -> Result<Vec<T>> {
                Ok(store.get(&bname(prefix, i, leaf))?.data().to_vec())
            };
            branches.push(BranchParams {
                kernel,
                bn: BnStats {
                    mean: vec("bn.mean")?,
                    std: vec("bn.std")?,
                    gamma: vec("bn.gamma")?,
                    beta: vec("bn.beta")?,
                },
                p: store.get(&bname(prefix, i, "p"))?.item(),
            });
        }
        let block = Self {
            branches,
            stride,
            fused: None,
        };
        block.validate(prefix)?;
        Ok(block)
    }
}

/// Block forward on the tape using stored parameters. Uses the fused
/// kernel when the store holds one.
pub(crate) fn wmp_block<'g, T: Scalar>(
    ctx: &crate::params::Ctx<'g, T>,
    prefix: &str,
    x: Var<'g, T>,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
) -> Result<Var<'g, T>> {
    if x.value().shape()[1] != in_ch {
        return shape_err(format!(
            "{prefix}: input has {} channels, expected {in_ch}",
            x.value().shape()[1]
        ));
    }
    let fused_w = format!("{prefix}.fused.weight");
    if ctx.has(&fused_w) {
        let w = ctx.param(&fused_w)?;
        let b = ctx.param(&format!("{prefix}.fused.bias"))?;
        return Ok(x.conv2d(w, Some(b), Conv2dSpec::new(stride, 1)).relu());
    }
    let layout = branch_layout(in_ch, out_ch, stride);
    let mut vars = Vec::with_capacity(3);
    for (i, kind) in layout.iter().enumerate() {
        let weight = match kind {
            BranchKind::Identity => None,
            _ => Some(ctx.param(&bname(prefix, i, "weight"))?),
        };
        let std = ctx.tensor(&bname(prefix, i, "bn.std"))?;
        if ctx.bn == BnMode::Running {
            let eps = T::from_f64_lossy(BN_EPS);
            if let Some((ch, s)) = std.data().iter().enumerate().find(|(_, s)| !(**s > eps)) {
                return Err(Error::InvalidBn(format!(
                    "{prefix}.b{i} channel {ch}: sigma = {s}"
                )));
            }
        }
        vars.push(BranchVars {
            weight,
            gamma: ctx.param(&bname(prefix, i, "bn.gamma"))?,
            beta: ctx.param(&bname(prefix, i, "bn.beta"))?,
            mean: ctx.tensor(&bname(prefix, i, "bn.mean"))?.clone(),
            std: std.clone(),
            p: ctx.param(&bname(prefix, i, "p"))?,
        });
    }
    let (pre, stats) = wmp_preact_graph(x, &vars, stride, ctx.bn);
    for (i, s) in stats.into_iter().enumerate() {
        if let Some(s) = s {
            ctx.record_bn(&format!("{prefix}.b{i}.bn"), s);
        }
    }
    Ok(pre.relu())
}

/// Moves running statistics toward a batch's statistics.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    bn_prefix: &str,
    stats: &BatchStats<T>,
) -> Result<()> {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let eps = T::from_f64_lossy(BN_EPS);
    let mean = store.get_mut(&format!("{bn_prefix}.mean"))?;
    for (r, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = (T::one() - m) * *r + m * b;
    }
    let std = store.get_mut(&format!("{bn_prefix}.std"))?;
    for (r, &v) in std.data_mut().iter_mut().zip(&stats.var) {
        let old_var = (*r * *r - eps).max(T::zero());
        let new_var = (T::one() - m) * old_var + m * v;
        *r = (new_var + eps).sqrt();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fold_identity_and_scaling() {
        let k = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1);
        let (k1, b1) = fold_conv_bn(&k, &BnStats::identity(2)).unwrap();
        assert_eq!(k1, k);
        assert!(b1.iter().all(|&b| b == 0.0));
        let mut bn = BnStats::identity(2);
        bn.gamma = vec![2.0, 2.0];
        let (k2, b2) = fold_conv_bn(&k, &bn).unwrap();
        assert_eq!(k2, k.scale(2.0));
        assert!(b2.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let mut bn = BnStats::identity(1);
        bn.std = vec![0.0];
        assert!(matches!(fold_conv_bn(&k, &bn), Err(Error::InvalidBn(_))));
        bn.std = vec![1e-5];
        assert!(matches!(fold_conv_bn(&k, &bn), Err(Error::InvalidBn(_))));
    }

    #[test]
    fn scalar_fusion_edge_values() {
        let k = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| i as f64 - 10.0);
        let (k1, b1) = fuse_branch_scalar(&k, &[1.0, -2.0], 1.0).unwrap();
        assert_eq!((k1, b1), (k.clone(), vec![1.0, -2.0]));
        let (k0, b0) = fuse_branch_scalar(&k, &[1.0, -2.0], 0.0).unwrap();
        assert!(k0.data().iter().chain(&b0).all(|&v| v == 0.0));
        assert!(matches!(
            fuse_branch_scalar(&k, &[0.0, 0.0], f64::NAN),
            Err(Error::InvalidParam(_))
        ));
        assert!(fuse_branch_scalar(&k, &[0.0, 0.0], f64::INFINITY).is_err());
    }

    #[test]
    fn padding_rules() {
        let one = BranchKernel::Conv(Tensor::<f64>::full(&[1, 1, 1, 1], 2.0));
        let k = pad_to_3x3(&one, 1, 1).unwrap();
        let want: Vec<f64> = (0..9).map(|i| if i == 4 { 2.0 } else { 0.0 }).collect();
        assert_eq!(k.data(), &want[..]);

        let id = pad_to_3x3::<f64>(&BranchKernel::Identity, 4, 4).unwrap();
        assert_eq!(id.shape(), &[4, 4, 3, 3]);
        for o in 0..4 {
            for i in 0..4 {
                for y in 0..3 {
                    for x in 0..3 {
                        let want = if o == i && y == 1 && x == 1 { 1.0 } else { 0.0 };
                        assert_eq!(id.at(&[o, i, y, x]), want);
                    }
                }
            }
        }
        assert!(matches!(
            pad_to_3x3::<f64>(&BranchKernel::Identity, 4, 8),
            Err(Error::InvalidStructure(_))
        ));
    }

    #[test]
    fn merge_with_zeros_absorbs() {
        let k = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |i| (i as f64).sin());
        let z = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        let (m, b) = merge_branches(&[
            (k.clone(), vec![0.5, 1.0]),
            (z.clone(), vec![0.0; 2]),
            (z.clone(), vec![0.0; 2]),
        ])
        .unwrap();
        assert_eq!(m, k);
        assert_eq!(b, vec![0.5, 1.0]);
        let (zz, _) = merge_branches(&[
            (z.clone(), vec![0.0; 2]),
            (z.clone(), vec![0.0; 2]),
            (z, vec![0.0; 2]),
        ])
        .unwrap();
        assert!(zz.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        assert!(merge_branches(&[(k, vec![0.0; 2]), (bad, vec![0.0; 2])]).is_err());
    }

    #[test]
    fn identity_only_block_fuses_to_delta() {
        // 3x3 and 1x1 branches switched off, identity branch with identity BN
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = WmpBlockParams::<f64>::init(&mut rng, 4, 4, 1);
        block.branches[0].p = 0.0;
        block.branches[1].p = 0.0;
        let fused = fuse_wmp(&block).unwrap().fused.unwrap();
        assert_eq!(
            fused.weight,
            pad_to_3x3(&BranchKernel::Identity, 4, 4).unwrap()
        );
        assert!(fused.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn single_identity_kernel_branch_reproduces_input() {
        let mut k = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.set(&[c, c, 1, 1], 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = WmpBlockParams::<f64>::init(&mut rng, 3, 3, 1);
        block.branches[0].kernel = BranchKernel::Conv(k);
        block.branches[1].p = 0.0;
        block.branches[2].p = 0.0;
        let x = init::uniform::<f64>(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
        let y = wmp_preactivation(&x, &block).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_input_zero_beta_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = WmpBlockParams::<f64>::random(&mut rng, 4, 6, 2);
        for b in &mut block.branches {
            b.bn.beta.iter_mut().for_each(|v| *v = 0.0);
            b.bn.mean.iter_mut().for_each(|v| *v = 0.0);
        }
        let y = wmp_preactivation(&Tensor::zeros(&[1, 4, 8, 8]), &block).unwrap();
        assert_eq!(y.shape(), &[1, 6, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = WmpBlockParams::<f64>::init(&mut rng, 4, 4, 1);
        let r = wmp_forward_train(&Tensor::zeros(&[1, 3, 4, 4]), &block);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn store_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (ci, co, s) in [(4, 4, 1), (4, 8, 2), (2, 2, 2)] {
            let block = WmpBlockParams::<f32>::random(&mut rng, ci, co, s);
            let mut store = ParamStore::new();
            block.write_to(&mut store, "blk");
            let back = WmpBlockParams::read_from(&store, "blk", ci, co, s).unwrap();
            assert_eq!(back, block);
        }
    }

    #[test]
    fn running_update_moves_toward_batch() {
        let mut store = ParamStore::<f64>::new();
        store.insert_buffer("bn.mean", Tensor::zeros(&[1]));
        store.insert_buffer("bn.std", Tensor::full(&[1], (1.0 + BN_EPS).sqrt()));
        let stats = BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        };
        update_running_stats(&mut store, "bn", &stats).unwrap();
        assert!((store.get("bn.mean").unwrap().item() - 0.1).abs() < 1e-12);
        let var = store.get("bn.std").unwrap().item().powi(2) - BN_EPS;
        assert!((var - 1.2).abs() < 1e-9);
    }
}
