//! Central finite differences against the tape's reverse sweep.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to round-off do not produce huge ratios.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            max_per_input: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `d f / d inputs` from the tape with central differences.
///
/// `f` must build a scalar from the given leaves and be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<_> = vals.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match cfg.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + cfg.step;
            let fp = eval(&work);
            work[ii].data_mut()[j] = orig - cfg.step;
            let fm = eval(&work);
            work[ii].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[ii].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ii, j, a, numeric));
            }
        }
    }
    report
}
