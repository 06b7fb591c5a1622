use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(outer, axis, inner)` decomposition of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape);
        self.graph.push(out, &[self.id], move |g, _| {
            vec![Some(g.clone().reshape(&in_shape))]
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert!(
            start + len <= shape[axis],
            "narrow {start}+{len} exceeds axis {axis} of {shape:?}"
        );
        let (outer, dim, inner) = split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        self.graph
            .push(Tensor::new(&out_shape, data), &[self.id], move |g, _| {
                let mut d = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    d.data_mut()[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(d)]
            })
    }

    /// 2-D window `[y0, y0+h) x [x0, x0+w)` of an NCHW tensor.
    pub fn crop(self, y0: usize, x0: usize, h: usize, w: usize) -> Var<'g, T> {
        self.narrow(2, y0, h).narrow(3, x0, w)
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = vals[0].shape().to_vec();
        for v in &vals {
            assert_eq!(v.rank(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat extent mismatch on axis {ax}");
            }
        }
        let dims: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in vals.iter().zip(&dims) {
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let part_shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.push(Tensor::new(&out_shape, data), &ids, move |g, need| {
            let mut outs: Vec<Vec<T>> = dims
                .iter()
                .map(|&d| Vec::with_capacity(outer * d * inner))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (buf, &d) in outs.iter_mut().zip(&dims) {
                    buf.extend_from_slice(&gd[off..off + d * inner]);
                    off += d * inner;
                }
            }
            outs.into_iter()
                .zip(&part_shapes)
                .zip(need)
                .map(|((buf, s), &n)| n.then(|| Tensor::new(s, buf)))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let b = g.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1);
        assert_eq!(c.shape(), vec![2, 4, 2, 2]);
        let back = c.narrow(1, 1, 3);
        assert_eq!(*back.value(), *b.value());
        let grads = g.backward(back.sum());
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
