//! Finite-difference gradient oracle.
//!
//! Independent of the tape: it only evaluates a black-box scalar function, so
//! it can falsify the analytic backward pass.

use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numerical_grad<F: Scalar>(f: &dyn Fn(&[F]) -> F, x: &[F], h: f64) -> Vec<F> {
    let h = F::of_f64(h);
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fplus = f(&probe);
        probe[i] = orig - h;
        let fminus = f(&probe);
        probe[i] = orig;
        grad.push((fplus - fminus) / (F::two() * h));
    }
    grad
}

/// Largest relative error between two gradient vectors, with denominators
/// floored at 1 so near-zero components compare absolutely.
pub fn max_rel_error<F: Scalar>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = 1.0f64.max(a.into_f64().abs()).max(n.into_f64().abs());
        worst = worst.max((a.into_f64() - n.into_f64()).abs() / denom);
    }
    worst
}
