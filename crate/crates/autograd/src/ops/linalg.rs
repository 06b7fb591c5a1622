use crate::graph::Var;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Rank-2 product `op(self) * op(rhs)` with optional transposes.
    pub fn matmul_t(self, rhs: Var<'g, T>, trans_a: bool, trans_b: bool) -> Var<'g, T> {
        let (av, bv) = (self.value(), rhs.value());
        assert_eq!(av.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(bv.rank(), 2, "matmul rhs must be rank 2");
        let (m, k) = if trans_a {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![T::zero(); m * n];
        crate::profile::add_macs(m * k * n);
        gemm(
            m,
            k,
            n,
            av.data(),
            trans_a,
            bv.data(),
            trans_b,
            &mut out,
            false,
        );
        self.graph.push(
            Tensor::new(&[m, n], out),
            &[self.id, rhs.id],
            move |g, need| {
                let gd = g.data();
                // C = A B  =>  dA = dC B^T, dB = A^T dC (transposes folded in)
                let da = need[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    if trans_a {
                        // A stored k x m: dA_stored = B dC^T
                        gemm(k, n, m, bv.data(), trans_b, gd, true, &mut d, false);
                        Tensor::new(&[k, m], d)
                    } else {
                        gemm(m, n, k, gd, false, bv.data(), !trans_b, &mut d, false);
                        Tensor::new(&[m, k], d)
                    }
                });
                let db = need[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    if trans_b {
                        // B stored n x k: dB_stored = dC^T A
                        gemm(n, m, k, gd, true, av.data(), trans_a, &mut d, false);
                        Tensor::new(&[n, k], d)
                    } else {
                        gemm(k, m, n, av.data(), !trans_a, gd, false, &mut d, false);
                        Tensor::new(&[k, n], d)
                    }
                });
                vec![da, db]
            },
        )
    }

    pub fn matmul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(rhs, false, false)
    }

    /// Fully connected layer: `x [n, in]`, `weight [out, in]`, `bias [out]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let y = self.matmul_t(weight, false, true);
        match bias {
            Some(b) => {
                let out = b.value().numel();
                y.add(b.reshape(&[1, out]))
            }
            None => y,
        }
    }
}
