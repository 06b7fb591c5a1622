use crate::graph::Var;
use crate::ops::elementwise::{bcast_binary, reduce_to};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph
            .push(Tensor::scalar(xv.sum()), &[self.id], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Sums over the axes where `shape` has size 1 (keepdim reduction).
    pub fn sum_to(self, shape: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let out = reduce_to(&xv, shape);
        let in_shape = xv.shape().to_vec();
        self.graph.push(out, &[self.id], move |g, _| {
            let zeros = Tensor::zeros(&in_shape);
            vec![Some(bcast_binary(&zeros, g, |_, b| b))]
        })
    }

    /// Mean over the axes where `shape` has size 1.
    pub fn mean_to(self, shape: &[usize]) -> Var<'g, T> {
        let full: usize = self.value().numel();
        let kept: usize = shape.iter().product();
        let div = T::from_usize((full / kept.max(1)).max(1)).unwrap();
        self.sum_to(shape).scale(T::one() / div)
    }

    fn extreme(self, want_max: bool) -> Var<'g, T> {
        let xv = self.value();
        assert!(xv.numel() > 0, "max/min of empty tensor");
        let mut best = 0;
        for (i, &v) in xv.data().iter().enumerate() {
            let b = xv.data()[best];
            if (want_max && v > b) || (!want_max && v < b) {
                best = i;
            }
        }
        let shape = xv.shape().to_vec();
        let val = xv.data()[best];
        self.graph
            .push(Tensor::scalar(val), &[self.id], move |g, _| {
                let mut d = Tensor::zeros(&shape);
                d.data_mut()[best] = g.item();
                vec![Some(d)]
            })
    }

    /// Largest element; the gradient flows to the first maximiser.
    pub fn max_all(self) -> Var<'g, T> {
        self.extreme(true)
    }

    /// Smallest element; the gradient flows to the first minimiser.
    pub fn min_all(self) -> Var<'g, T> {
        self.extreme(false)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let inner = *shape.last().expect("softmax on rank-0 tensor");
        let mut out = vec![T::zero(); xv.numel()];
        for (row, dst) in xv.data().chunks(inner).zip(out.chunks_mut(inner)) {
            let m = row
                .iter()
                .copied()
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut z = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z = z + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / z;
            }
        }
        let y = Tensor::new(&shape, out);
        let yv = y.clone();
        self.graph.push(y, &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); g.numel()];
            for ((yr, gr), dr) in yv
                .data()
                .chunks(inner)
                .zip(g.data().chunks(inner))
                .zip(dx.chunks_mut(inner))
            {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &y), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (gg - dot);
                }
            }
            vec![Some(Tensor::new(g.shape(), dx))]
        })
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather_flat(self, indices: &[usize]) -> Var<'g, T> {
        let xv = self.value();
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let idx = indices.to_vec();
        let shape = xv.shape().to_vec();
        self.graph.push(
            Tensor::new(&[indices.len()], data),
            &[self.id],
            move |g, _| {
                let mut d = Tensor::zeros(&shape);
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    d.data_mut()[i] = d.data()[i] + gv;
                }
                vec![Some(d)]
            },
        )
    }
}
