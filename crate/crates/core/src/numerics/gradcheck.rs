//! Central finite differences, the independent oracle for tape gradients.

use super::matrix::Matrix;

/// Default step for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Below this magnitude both
/// gradients are treated as zero and the absolute difference is scored.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `(f(x + h·e) − f(x − h·e)) / 2h` for every entry of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let all: Vec<usize> = (0..x.len()).collect();
    let vals = finite_diff_entries(&mut f, x, h, &all);
    Matrix::from_vec(x.rows(), x.cols(), vals).expect("shape preserved")
}

/// Central differences for the listed flat (row-major) entries only.
pub fn finite_diff_entries(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
    entries: &[usize],
) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    entries
        .iter()
        .map(|&i| {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + h;
            let plus = f(&probe);
            probe.as_mut_slice()[i] = orig - h;
            let minus = f(&probe);
            probe.as_mut_slice()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Matrix::from_fn(3, 4, |r, c| r as f64 - c as f64 * 0.5);
        let g = finite_diff_grad(|m| m.sum(), &x, DEFAULT_STEP);
        assert!(g.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_squared_norm_has_gradient_x() {
        let x = Matrix::from_fn(2, 5, |r, c| (r * 5 + c) as f64 * 0.3 - 1.0);
        let f = |m: &Matrix| 0.5 * m.as_slice().iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(f, &x, 1e-4);
        assert!(g.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn relative_error_floor_applies_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
