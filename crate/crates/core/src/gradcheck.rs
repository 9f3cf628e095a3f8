//! Central finite-difference gradient checking.
//!
//! This is the independent numeric oracle used by the test suites: it only
//! ever evaluates a function forward at perturbed inputs, so it shares no
//! code path with the reverse-mode engine it is used to verify.

/// Central finite-difference gradient of `f` at `x` with perturbation `h`.
pub fn finite_difference_grad<F>(f: &mut F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: `|a - n| / max(1, |a|, |n|)`, maximized over components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_oracle_precision() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = finite_difference_grad(&mut f, &x, 1e-5);
        let expected = [2.0, -4.0, 1.0];
        assert!(max_relative_error(&expected, &g) < 1e-9);
    }
}
