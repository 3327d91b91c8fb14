//! Central finite-difference checking of analytic gradients.

use super::{Graph, Tensor};
use crate::array::Array;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over checked (non-excluded) elements.
    pub max_rel_err: f64,
    pub rel_errs: Vec<f64>,
    /// Elements skipped because the function is locally nonsmooth there
    /// (e.g. a relu kink straddles the probe interval).
    pub excluded: Vec<usize>,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.rtol
    }
}

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences, element by element. Report-only: never fails, the
/// caller decides what to do with the result.
///
/// Kinks are detected by the centered second difference: for smooth f it is
/// O(step^2) while at a relu-style kink it is O(step), which makes the
/// normalized ratio an O(1) flag.
pub fn grad_check<F>(f: F, input: &Array, rtol: f64, step: f64) -> GradCheckReport
where
    F: Fn(&Graph, &Tensor) -> Tensor,
{
    assert!(step > 0.0, "step must be positive");
    let eval = |a: &Array| -> f64 {
        let g = Graph::new();
        let x = g.leaf(a);
        f(&g, &x).item()
    };
    let analytic: Vec<f64> = {
        let g = Graph::new();
        let x = g.leaf(input);
        let y = f(&g, &x);
        g.backward(&y, &[&x])
            .expect("grad_check function must produce a scalar")
            .grads[0]
            .value()
            .into_vec()
    };

    let f0 = eval(input);
    let mut rel_errs = Vec::with_capacity(input.len());
    let mut excluded = Vec::new();
    let mut max_rel = 0.0_f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&plus);
        let fm = eval(&minus);
        let numeric = (fp - fm) / (2.0 * step);
        let second = fp + fm - 2.0 * f0;
        let scale = numeric.abs().max(analytic[i].abs()).max(1.0);
        if second.abs() / (step * scale) > 0.1 {
            excluded.push(i);
            rel_errs.push(f64::NAN);
            continue;
        }
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
        let rel = (analytic[i] - numeric).abs() / denom;
        rel_errs.push(rel);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        max_rel_err: max_rel,
        rel_errs,
        excluded,
        rtol,
    }
}
