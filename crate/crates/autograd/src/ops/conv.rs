use crate::graph::Var;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Stride / zero-padding / dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn out_size(&self, input: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(
            input + 2 * self.pad >= span,
            "conv window {span} larger than padded input {}",
            input + 2 * self.pad
        );
        (input + 2 * self.pad - span) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] = prow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain forward convolution on tensors, no tape. `weight` is
/// `(C_out, C_in, kh, kw)`, `bias` has `C_out` entries.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (co, ci, kh, kw) = weight.dims4();
    assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
    if let Some(b) = bias {
        assert_eq!(b.numel(), co, "conv2d: bias length");
    }
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let kdim = ci * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![T::zero(); n * co * ohw];
    let mut cols = vec![T::zero(); kdim * ohw];
    let pointwise = spec.is_pointwise(kh, kw);
    crate::profile::add_macs(n * co * kdim * ohw);
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let col_src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, w, kh, kw, spec, oh, ow, &mut cols);
            &cols
        };
        let ob = &mut out[b * co * ohw..(b + 1) * co * ohw];
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_mut(ohw).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        gemm(
            co,
            kdim,
            ohw,
            weight.data(),
            false,
            col_src,
            false,
            ob,
            bias.is_some(),
        );
    }
    Tensor::new(&[n, co, oh, ow], out)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D cross-correlation (PyTorch `conv2d` semantics, groups = 1).
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: Conv2dSpec,
    ) -> Var<'g, T> {
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.map(|b| b.value());
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), spec);
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.graph.push(out, &parents, move |g, need| {
            let (n, c, h, w) = xv.dims4();
            let (co, ci, kh, kw) = wv.dims4();
            let (_, _, oh, ow) = g.dims4();
            let ohw = oh * ow;
            let kdim = ci * kh * kw;
            let pointwise = spec.is_pointwise(kh, kw);
            let mut dx = need[0].then(|| vec![T::zero(); n * c * h * w]);
            let mut dw = need[1].then(|| vec![T::zero(); co * kdim]);
            let mut cols = vec![T::zero(); kdim * ohw];
            let mut dcols = vec![T::zero(); kdim * ohw];
            for b in 0..n {
                let gb = &g.data()[b * co * ohw..(b + 1) * co * ohw];
                let xb = &xv.data()[b * c * h * w..(b + 1) * c * h * w];
                if let Some(dw) = dw.as_mut() {
                    let col_src: &[T] = if pointwise {
                        xb
                    } else {
                        im2col(xb, c, h, w, kh, kw, spec, oh, ow, &mut cols);
                        &cols
                    };
                    // dW += dY * cols^T
                    gemm(co, ohw, kdim, gb, false, col_src, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                    if pointwise {
                        gemm(kdim, co, ohw, wv.data(), true, gb, false, dxb, true);
                    } else {
                        gemm(kdim, co, ohw, wv.data(), true, gb, false, &mut dcols, false);
                        col2im(&dcols, c, h, w, kh, kw, spec, oh, ow, dxb);
                    }
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::new(xv.shape(), d)),
                dw.map(|d| Tensor::new(wv.shape(), d)),
            ];
            if has_bias {
                let db = need[2].then(|| {
                    let mut d = vec![T::zero(); co];
                    for b in 0..n {
                        for (o, acc) in d.iter_mut().enumerate() {
                            let s = b * co * ohw + o * ohw;
                            *acc = *acc + g.data()[s..s + ohw].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(&[co], d)
                });
                res.push(db);
            }
            res
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(wd, kw);
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        s += x.at(&[b, ci, iy as usize, ix as usize])
                                            * w.at(&[o, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, oy, ox], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64) * 0.1 - 0.5);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f64) * 0.2 - 0.6);
        for spec in [
            Conv2dSpec::new(1, 1),
            Conv2dSpec::new(2, 1),
            Conv2dSpec {
                stride: 1,
                pad: 2,
                dilation: 2,
            },
        ] {
            let got = conv2d_forward(&x, &w, None, spec);
            let want = naive(&x, &w, spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "{spec:?}");
        }
    }
}
