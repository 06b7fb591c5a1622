//! Modulated deformable convolution (DCNv2).
//!
//! Offsets are laid out as `(N, 2K, OH, OW)` with `(dy, dx)` pairs per kernel
//! tap `k = ky * kw + kx`; the modulation mask is `(N, K, OH, OW)` and is used
//! as given (callers apply the sigmoid). Sampling follows the usual zero
//! padding rule: a point outside `(-1, H) x (-1, W)` reads as zero and corners
//! outside the map contribute nothing.

use crate::graph::Var;
use crate::ops::conv::Conv2dSpec;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Bilinear corner taps `(flat index, weight)` plus the partial derivatives of
/// the weights with respect to `y` and `x`.
struct Taps<T> {
    idx: [usize; 4],
    w: [T; 4],
    dwy: [T; 4],
    dwx: [T; 4],
    valid: [bool; 4],
}

fn taps<T: Scalar>(h: usize, w: usize, y: T, x: T) -> Option<Taps<T>> {
    let (hf, wf) = (T::from_usize(h).unwrap(), T::from_usize(w).unwrap());
    if y <= -T::one() || y >= hf || x <= -T::one() || x >= wf {
        return None;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let (ly, lx) = (y - y0, x - x0);
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let y0i = y0.to_i64().unwrap();
    let x0i = x0.to_i64().unwrap();
    let corners = [
        (y0i, x0i),
        (y0i, x0i + 1),
        (y0i + 1, x0i),
        (y0i + 1, x0i + 1),
    ];
    let mut t = Taps {
        idx: [0; 4],
        w: [hy * hx, hy * lx, ly * hx, ly * lx],
        dwy: [-hx, -lx, hx, lx],
        dwx: [-hy, hy, -ly, ly],
        valid: [false; 4],
    };
    for (i, &(cy, cx)) in corners.iter().enumerate() {
        if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
            t.valid[i] = true;
            t.idx[i] = cy as usize * w + cx as usize;
        }
    }
    Some(t)
}

/// Bilinear read of one plane with the zero rule above.
pub fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    match taps(h, w, y, x) {
        None => T::zero(),
        Some(t) => (0..4)
            .filter(|&i| t.valid[i])
            .map(|i| t.w[i] * plane[t.idx[i]])
            .sum(),
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.kh * self.kw
    }

    /// Sampling position of tap `k` for output pixel `p` of batch item `b`.
    fn position<T: Scalar>(&self, off: &[T], k: usize, p: usize) -> (T, T) {
        let ohw = self.oh * self.ow;
        let (oy, ox) = (p / self.ow, p % self.ow);
        let (ky, kx) = (k / self.kw, k % self.kw);
        let base_y =
            (oy * self.spec.stride + ky * self.spec.dilation) as f64 - self.spec.pad as f64;
        let base_x =
            (ox * self.spec.stride + kx * self.spec.dilation) as f64 - self.spec.pad as f64;
        let dy = off[(2 * k) * ohw + p];
        let dx = off[(2 * k + 1) * ohw + p];
        (
            T::from_f64_lossy(base_y) + dy,
            T::from_f64_lossy(base_x) + dx,
        )
    }

    fn columns<T: Scalar>(&self, x: &[T], off: &[T], mask: &[T], cols: &mut [T]) {
        let ohw = self.oh * self.ow;
        let kk = self.k();
        for k in 0..kk {
            for p in 0..ohw {
                let (y, xx) = self.position(off, k, p);
                let m = mask[k * ohw + p];
                match taps(self.h, self.w, y, xx) {
                    None => {
                        for ci in 0..self.c {
                            cols[(ci * kk + k) * ohw + p] = T::zero();
                        }
                    }
                    Some(t) => {
                        for ci in 0..self.c {
                            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                            let v: T = (0..4)
                                .filter(|&i| t.valid[i])
                                .map(|i| t.w[i] * plane[t.idx[i]])
                                .sum();
                            cols[(ci * kk + k) * ohw + p] = m * v;
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// DCNv2 forward: `y = W * cols(x; offset, mask) + b`.
    pub fn deform_conv2d(
        self,
        offset: Var<'g, T>,
        mask: Var<'g, T>,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: Conv2dSpec,
    ) -> Var<'g, T> {
        let (xv, ov, mv, wv) = (self.value(), offset.value(), mask.value(), weight.value());
        let bv = bias.map(|b| b.value());
        let (n, c, h, w) = xv.dims4();
        let (co, ci, kh, kw) = wv.dims4();
        assert_eq!(c, ci, "deform_conv2d: channel mismatch");
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh: spec.out_size(h, kh),
            ow: spec.out_size(w, kw),
            spec,
        };
        let kk = geo.k();
        let ohw = geo.oh * geo.ow;
        assert_eq!(ov.shape(), &[n, 2 * kk, geo.oh, geo.ow], "offset shape");
        assert_eq!(mv.shape(), &[n, kk, geo.oh, geo.ow], "mask shape");
        let kdim = c * kk;
        let mut out = vec![T::zero(); n * co * ohw];
        let mut cols = vec![T::zero(); kdim * ohw];
        crate::profile::add_macs(n * co * kdim * ohw);
        for b in 0..n {
            let xb = &xv.data()[b * c * h * w..(b + 1) * c * h * w];
            let ob = &ov.data()[b * 2 * kk * ohw..(b + 1) * 2 * kk * ohw];
            let mb = &mv.data()[b * kk * ohw..(b + 1) * kk * ohw];
            geo.columns(xb, ob, mb, &mut cols);
            let yb = &mut out[b * co * ohw..(b + 1) * co * ohw];
            if let Some(bias) = &bv {
                for (o, row) in yb.chunks_mut(ohw).enumerate() {
                    row.fill(bias.data()[o]);
                }
            }
            gemm(
                co,
                kdim,
                ohw,
                wv.data(),
                false,
                &cols,
                false,
                yb,
                bv.is_some(),
            );
        }
        let out = Tensor::new(&[n, co, geo.oh, geo.ow], out);
        let mut parents = vec![self.id, offset.id, mask.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.graph.push(out, &parents, move |g, need| {
            let mut dx = need[0].then(|| vec![T::zero(); xv.numel()]);
            let mut doff = need[1].then(|| vec![T::zero(); ov.numel()]);
            let mut dmask = need[2].then(|| vec![T::zero(); mv.numel()]);
            let mut dw = need[3].then(|| vec![T::zero(); wv.numel()]);
            let mut cols = vec![T::zero(); kdim * ohw];
            let mut dcols = vec![T::zero(); kdim * ohw];
            let need_sampling = need[0] || need[1] || need[2];
            for b in 0..n {
                let xb = &xv.data()[b * c * h * w..(b + 1) * c * h * w];
                let ob = &ov.data()[b * 2 * kk * ohw..(b + 1) * 2 * kk * ohw];
                let mb = &mv.data()[b * kk * ohw..(b + 1) * kk * ohw];
                let gb = &g.data()[b * co * ohw..(b + 1) * co * ohw];
                if let Some(dw) = dw.as_mut() {
                    geo.columns(xb, ob, mb, &mut cols);
                    gemm(co, ohw, kdim, gb, false, &cols, true, dw, true);
                }
                if !need_sampling {
                    continue;
                }
                gemm(kdim, co, ohw, wv.data(), true, gb, false, &mut dcols, false);
                for k in 0..kk {
                    for p in 0..ohw {
                        let (y, xx) = geo.position(ob, k, p);
                        let Some(t) = taps(h, w, y, xx) else { continue };
                        let m = mb[k * ohw + p];
                        let (mut gy, mut gx, mut gm) = (T::zero(), T::zero(), T::zero());
                        for ci in 0..c {
                            let gc = dcols[(ci * kk + k) * ohw + p];
                            if gc == T::zero() {
                                continue;
                            }
                            let base = ci * h * w;
                            for i in 0..4 {
                                if !t.valid[i] {
                                    continue;
                                }
                                let v = xb[base + t.idx[i]];
                                gm = gm + gc * t.w[i] * v;
                                gy = gy + gc * m * t.dwy[i] * v;
                                gx = gx + gc * m * t.dwx[i] * v;
                                if let Some(dx) = dx.as_mut() {
                                    let o = b * c * h * w + base + t.idx[i];
                                    dx[o] = dx[o] + gc * m * t.w[i];
                                }
                            }
                        }
                        if let Some(dm) = dmask.as_mut() {
                            let o = b * kk * ohw + k * ohw + p;
                            dm[o] = dm[o] + gm;
                        }
                        if let Some(d) = doff.as_mut() {
                            let oy = b * 2 * kk * ohw + (2 * k) * ohw + p;
                            d[oy] = d[oy] + gy;
                            d[oy + ohw] = d[oy + ohw] + gx;
                        }
                    }
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::new(xv.shape(), d)),
                doff.map(|d| Tensor::new(ov.shape(), d)),
                dmask.map(|d| Tensor::new(mv.shape(), d)),
                dw.map(|d| Tensor::new(wv.shape(), d)),
            ];
            if has_bias {
                res.push(need[4].then(|| {
                    let mut d = vec![T::zero(); co];
                    for b in 0..n {
                        for (o, acc) in d.iter_mut().enumerate() {
                            let s = (b * co + o) * ohw;
                            *acc = *acc + g.data()[s..s + ohw].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(&[co], d)
                }));
            }
            res
        })
    }
}
