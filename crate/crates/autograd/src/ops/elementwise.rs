use std::ops;
use std::rc::Rc;

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Result shape of broadcasting two same-rank shapes (size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "broadcast needs equal ranks, got {a:?} and {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            x.max(y)
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(st)
        .map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visits every output index of `out` with the matching offsets into two
/// broadcast operands.
fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for k in 0..inner {
            f(o + k, oa + k * ia, ob + k * ib);
        }
        o += inner;
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn bcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = bcast_strides(a.shape(), &out);
    let sb = bcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::new(&out, data)
}

/// Sums `g` down to `shape` (the inverse of broadcasting `shape` up to `g`).
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let s_dst = bcast_strides(shape, &out);
    let zeros = vec![0; out.len()];
    let mut data = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_pair(&out, &s_dst, &zeros, |o, d, _| data[d] = data[d] + gd[o]);
    Tensor::new(shape, data)
}

impl<'g, T: Scalar> Var<'g, T> {
    fn binary(
        self,
        rhs: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        // (a, b, g) -> (da contribution, db contribution), per element
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Var<'g, T> {
        let (av, bv) = (self.value(), rhs.value());
        let out = bcast_binary(&av, &bv, f);
        self.graph.push(out, &[self.id, rhs.id], move |g, need| {
            let shape = g.shape().to_vec();
            let sa = bcast_strides(av.shape(), &shape);
            let sb = bcast_strides(bv.shape(), &shape);
            let mut ga = vec![T::zero(); g.numel()];
            let mut gb = vec![T::zero(); g.numel()];
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            for_each_pair(&shape, &sa, &sb, |o, i, j| {
                let (x, y) = df(ad[i], bd[j], gd[o]);
                ga[o] = x;
                gb[o] = y;
            });
            let da = need[0].then(|| reduce_to(&Tensor::new(&shape, ga), av.shape()));
            let db = need[1].then(|| reduce_to(&Tensor::new(&shape, gb), bv.shape()));
            vec![da, db]
        })
    }

    pub fn add(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.binary(rhs, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.binary(rhs, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.binary(rhs, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.binary(rhs, |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// Elementwise op with derivative expressed through input `x` and output `y`.
    pub(crate) fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let xv = self.value();
        let out = xv.map(f);
        let yv = Rc::new(out.clone());
        self.graph.push(out, &[self.id], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// `sqrt` with the subgradient 0 at exactly 0.
    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(
            |x| x.sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::one() / (y + y)
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamps values to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

macro_rules! impl_operator {
    ($tr:ident, $method:ident, $call:ident) => {
        impl<'g, T: Scalar> ops::$tr for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Var<'g, T>) -> Var<'g, T> {
                Var::$call(self, rhs)
            }
        }
    };
}

impl_operator!(Add, add, add);
impl_operator!(Sub, sub, sub);
impl_operator!(Mul, mul, mul);
impl_operator!(Div, div, div);

impl<'g, T: Scalar> ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Var<'g, T> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn broadcast_per_channel_scale() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let s = Tensor::from_f64(&[1, 3, 1, 1], &[1.0, 10.0, 100.0]);
        let y = bcast_binary(&x, &s, |a, b| a * b);
        assert_eq!(y.at(&[1, 2, 1, 0]), x.at(&[1, 2, 1, 0]) * 100.0);
        assert_eq!(y.at(&[0, 1, 0, 1]), x.at(&[0, 1, 0, 1]) * 10.0);
        let r = reduce_to(&y, &[1, 3, 1, 1]);
        let want: f64 = (0..2)
            .flat_map(|n| (0..4).map(move |k| (n, k)))
            .map(|(n, k)| x.data()[n * 12 + 4 + k] * 10.0)
            .sum();
        assert!((r.data()[1] - want).abs() < 1e-9);
    }

    #[test]
    fn mul_broadcast_gradient_sums_over_stretched_axes() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[1, 2, 1, 3], |i| i as f64 + 1.0));
        let s = g.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[2.0, -1.0]));
        let y = (x * s).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(s).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]
        );
    }
}
