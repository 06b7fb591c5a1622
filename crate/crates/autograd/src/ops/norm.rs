use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics of the batch a normalisation saw.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (what running estimates accumulate).
    pub var: Vec<T>,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Batch normalisation with statistics of the current batch.
    /// `gamma` and `beta` have shape `[C]`.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: T,
    ) -> (Var<'g, T>, BatchStats<T>) {
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let (n, c, h, w) = xv.dims4();
        assert_eq!(gv.numel(), c, "batch_norm: gamma length");
        assert_eq!(bv.numel(), c, "batch_norm: beta length");
        let hw = h * w;
        let m = n * hw;
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let o = (b * c + ch) * hw;
                s = s + xv.data()[o..o + hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut v = T::zero();
            for b in 0..n {
                let o = (b * c + ch) * hw;
                v = v + xv.data()[o..o + hw]
                    .iter()
                    .map(|&x| (x - mu) * (x - mu))
                    .sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = v / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    xhat[i] = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let unbiased = if m > 1 {
            let r = mf / T::from_usize(m - 1).unwrap();
            var.iter().map(|&v| v * r).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let shape = xv.shape().to_vec();
        let y = self.graph.push(
            Tensor::new(&shape, out),
            &[self.id, gamma.id, beta.id],
            move |g, need| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            dgamma[ch] = dgamma[ch] + gd[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                let dx = need[0].then(|| {
                    // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gv.data()[ch] * inv_std[ch] / mf;
                            let o = (b * c + ch) * hw;
                            for i in o..o + hw {
                                dx[i] = k * (mf * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    Tensor::new(&shape, dx)
                });
                vec![
                    dx,
                    need[1].then(|| Tensor::new(&[c], dgamma)),
                    need[2].then(|| Tensor::new(&[c], dbeta)),
                ]
            },
        );
        (y, stats)
    }
}
