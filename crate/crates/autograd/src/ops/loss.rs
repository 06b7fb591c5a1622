use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Summed binary cross-entropy between logits and `{0, 1}` (or soft)
    /// targets, evaluated in the overflow-free softplus form.
    pub fn bce_with_logits_sum(self, targets: &Tensor<T>) -> Var<'g, T> {
        let xv = self.value();
        assert_eq!(xv.shape(), targets.shape(), "bce: target shape");
        let loss: T = xv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let tv = targets.clone();
        self.graph
            .push(Tensor::scalar(loss), &[self.id], move |g, _| {
                let s = g.item();
                let d = xv.zip_map(&tv, |x, t| s * (crate::ops::elementwise::sigmoid(x) - t));
                vec![Some(d)]
            })
    }
}
