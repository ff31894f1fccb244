//! Central finite-difference oracle for validating tape gradients.

use super::params::ParamSet;
use super::tensor::Tensor2D;

/// Floor added to the finite-difference magnitude in the relative error.
/// Central differences carry ~1e-11 absolute roundoff at unit loss scale, so
/// exactly-zero gradients (dead ReLUs, inactive hinges) need a floor well above it.
pub const GRAD_CHECK_EPS: f64 = 1e-6;

/// Location and size of the worst disagreement found by [`grad_check_fd`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `f` with step `h`,
/// returning the largest `|analytic - fd| / (|fd| + eps)` over all scalars.
pub fn grad_check_fd(
    mut f: impl FnMut(&ParamSet) -> f64,
    params: &ParamSet,
    analytic: &[Tensor2D],
    h: f64,
) -> GradCheckReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for p in 0..params.len() {
        for e in 0..params.get(p).len() {
            let orig = params.get(p).data()[e];
            probe.get_mut(p).data_mut()[e] = orig + h;
            let plus = f(&probe);
            probe.get_mut(p).data_mut()[e] = orig - h;
            let minus = f(&probe);
            probe.get_mut(p).data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[e];
            let rel = (a - numeric).abs() / (numeric.abs() + GRAD_CHECK_EPS);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    param: p,
                    element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut params = ParamSet::new();
        params.push("w", Tensor2D::new(1, 3, vec![0.4, -1.3, 2.2]).unwrap());
        let f = |p: &ParamSet| p.get(0).data().iter().enumerate().map(|(i, w)| (i + 1) as f64 * w * w).sum();
        let grad = Tensor2D::new(
            1,
            3,
            params.get(0).data().iter().enumerate().map(|(i, w)| 2.0 * (i + 1) as f64 * w).collect(),
        )
        .unwrap();
        let report = grad_check_fd(f, &params, &[grad], 1e-5);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = ParamSet::new();
        params.push("w", Tensor2D::filled(2, 2, 1.0));
        let report = grad_check_fd(|_| 4.2, &params, &[Tensor2D::zeros(2, 2)], 1e-4);
        assert_eq!(report.max_rel_error, 0.0);
    }
}
