//! Central finite differences and the relative-error metric used to audit
//! hand-written backward rules.

/// Magnitude floor for the relative-error denominator. Below it, a central
/// difference at step `1e-4` is dominated by floating-point cancellation, so
/// the comparison degrades to an absolute one at `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;

/// Step used by every finite-difference check in the crate.
pub const FD_STEP: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x0 + h) - f(x0 - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Worst relative error over a set of `(analytic, numeric)` pairs.
pub fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x * x * x, 2.0, FD_STEP);
        assert!(relative_error(12.0, d) < 1e-8);
    }

    #[test]
    fn floor_applies_to_tiny_values() {
        assert!(relative_error(0.0, 1e-12) < 1e-7);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
