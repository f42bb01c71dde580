//! Pure matrix kernels. Every differentiable operation of the tape is a thin
//! wrapper over one of these.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::matrix::{shape_str, Matrix};
use crate::error::{contract, Result};

/// Rows of the output handed to one GEMM call when the product is large.
/// Fixed so the split never depends on the size of the thread pool.
const ROW_BLOCK: usize = 64;
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// Strided view of an operand: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>) -> Matrix {
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let kernel = |row0: usize, c: &mut [f64]| {
        let rows = c.len() / n;
        // SAFETY: the views cover `rows` rows starting at `row0` of `a` and
        // all of `b`; both were sized by the caller from validated shapes, and
        // `c` is exactly `rows * n` contiguous elements.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(row0 * a.rs),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && m > ROW_BLOCK {
        out.as_mut_slice()
            .par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, c)| kernel(i * ROW_BLOCK, c));
    } else {
        kernel(0, out.as_mut_slice());
    }
    out
}

fn dims_err(op: &str, a: &Matrix, b: &Matrix) -> crate::error::HsqError {
    contract(format!(
        "{op}: incompatible shapes {} and {}",
        shape_str(a),
        shape_str(b)
    ))
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(dims_err("matmul", a, b));
    }
    let out = gemm(
        a.rows(),
        a.cols(),
        b.cols(),
        View { data: a.as_slice(), rs: a.cols(), cs: 1 },
        View { data: b.as_slice(), rs: b.cols(), cs: 1 },
    );
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(dims_err("matmul_nt", a, b));
    }
    let out = gemm(
        a.rows(),
        a.cols(),
        b.rows(),
        View { data: a.as_slice(), rs: a.cols(), cs: 1 },
        View { data: b.as_slice(), rs: 1, cs: b.cols() },
    );
    out.ensure_finite("matmul_nt")?;
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(dims_err("matmul_tn", a, b));
    }
    let out = gemm(
        a.cols(),
        a.rows(),
        b.cols(),
        View { data: a.as_slice(), rs: 1, cs: a.cols() },
        View { data: b.as_slice(), rs: b.cols(), cs: 1 },
    );
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(dims_err("add", a, b));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(dims_err("mul", a, b));
    }
    let mut out = a.clone();
    for (x, y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x *= y;
    }
    Ok(out)
}

/// Adds a `1×cols` row to every row of `x`.
pub fn add_row(x: &Matrix, row: &Matrix) -> Result<Matrix> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(dims_err("add_row", x, row));
    }
    let mut out = x.clone();
    let r = row.as_slice();
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(r) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn scale(x: &Matrix, s: f64) -> Matrix {
    x.map(|v| v * s)
}

fn check_finite(x: &Matrix, op: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(contract(format!("{op}: input contains non-finite values")))
    }
}

fn softmax_masked_row(src: &[f64], keep: impl Fn(usize) -> bool, dst: &mut [f64]) {
    let max = src
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
        if keep(j) {
            *d = (s - max).exp();
            sum += *d;
        } else {
            *d = 0.0;
        }
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Result<Matrix> {
    check_finite(x, "softmax_rows")?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        softmax_masked_row(x.row(i), |_| true, out.row_mut(i));
    }
    Ok(out)
}

/// Row-wise softmax restricted to the listed columns of each row; every other
/// entry is exactly zero (its logit is treated as −∞).
pub fn masked_softmax_rows(x: &Matrix, selection: &[Vec<usize>]) -> Result<Matrix> {
    check_finite(x, "masked_softmax_rows")?;
    if selection.len() != x.rows() {
        return Err(contract(format!(
            "masked_softmax_rows: {} selections for {} rows",
            selection.len(),
            x.rows()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut mask = vec![false; x.cols()];
    for (i, sel) in selection.iter().enumerate() {
        if sel.is_empty() {
            return Err(contract(format!("masked_softmax_rows: row {i} keeps no entries")));
        }
        mask.iter_mut().for_each(|m| *m = false);
        for &j in sel {
            if j >= x.cols() {
                return Err(contract(format!(
                    "masked_softmax_rows: column {j} out of range for {} columns",
                    x.cols()
                )));
            }
            mask[j] = true;
        }
        softmax_masked_row(x.row(i), |j| mask[j], out.row_mut(i));
    }
    Ok(out)
}

/// Per-row normalization statistics: `(mean, 1/sqrt(var + eps))`.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    if x.cols() == 0 {
        return Err(contract("layer_norm: zero-length rows"));
    }
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(contract(format!(
            "layer_norm: gain {} / bias {} do not match {} columns",
            shape_str(gain),
            shape_str(bias),
            x.cols()
        )));
    }
    if !(eps > 0.0) {
        return Err(contract(format!("layer_norm: eps must be positive, got {eps}")));
    }
    let (g, b) = (gain.as_slice(), bias.as_slice());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (mean, inv) = row_moments(x.row(i), eps);
        for (j, (o, &v)) in out.row_mut(i).iter_mut().zip(x.row(i)).enumerate() {
            *o = (v - mean) * inv * g[j] + b[j];
        }
    }
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(|v| v * std_normal_cdf(v))
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_derivative(x: &Matrix) -> Matrix {
    x.map(|v| std_normal_cdf(v) + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp())
}

pub fn slice_cols(x: &Matrix, start: usize, len: usize) -> Result<Matrix> {
    if start + len > x.cols() {
        return Err(contract(format!(
            "slice_cols: columns {start}..{} out of range for {}",
            start + len,
            shape_str(x)
        )));
    }
    Ok(Matrix::from_fn(x.rows(), len, |r, c| x.get(r, start + c)))
}

pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(contract("concat_cols: parts disagree on row count"));
    }
    let cols = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        let dst = out.row_mut(r);
        for p in parts {
            dst[off..off + p.cols()].copy_from_slice(p.row(r));
            off += p.cols();
        }
    }
    Ok(out)
}

pub fn gather_rows(x: &Matrix, idx: &[usize]) -> Result<Matrix> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
        return Err(contract(format!(
            "gather_rows: row {bad} out of range for {}",
            shape_str(x)
        )));
    }
    let mut out = Matrix::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    Ok(out)
}

/// Places row `r` of `x` at row `idx[r]` of a zero `rows × cols` matrix.
/// Indices must be distinct.
pub fn scatter_rows(x: &Matrix, idx: &[usize], rows: usize) -> Result<Matrix> {
    if idx.len() != x.rows() {
        return Err(contract(format!(
            "scatter_rows: {} indices for {} rows",
            idx.len(),
            x.rows()
        )));
    }
    let mut out = Matrix::zeros(rows, x.cols());
    for (r, &i) in idx.iter().enumerate() {
        if i >= rows {
            return Err(contract(format!("scatter_rows: target row {i} out of range for {rows}")));
        }
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    Ok(out)
}

/// Column `j` as an `rows × 1` matrix.
pub fn column(x: &Matrix, j: usize) -> Result<Matrix> {
    if j >= x.cols() {
        return Err(contract(format!("column: {j} out of range for {}", shape_str(x))));
    }
    Ok(Matrix::from_fn(x.rows(), 1, |r, _| x.get(r, j)))
}

/// Multiplies row `r` of `x` by `s[r]`, with `s` a column vector.
pub fn scale_rows(x: &Matrix, s: &Matrix) -> Result<Matrix> {
    if s.cols() != 1 || s.rows() != x.rows() {
        return Err(dims_err("scale_rows", x, s));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let f = s.get(r, 0);
        out.row_mut(r).iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

pub fn mean_rows(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(contract("mean_rows: empty matrix"));
    }
    let mut out = Matrix::zeros(1, x.cols());
    for row in x.iter_rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = x.rows() as f64;
    out.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

pub fn sum_all(x: &Matrix) -> Matrix {
    Matrix::filled(1, 1, x.sum())
}

/// Row order that sorts rows lexicographically (ties keep their input order).
pub fn canonical_row_order(x: &Matrix) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(4, 5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn matmul_stage_one_geometry() {
        let a = Matrix::filled(3136, 384, 0.5);
        let b = Matrix::filled(384, 384, 0.25);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (3136, 384));
        assert_eq!(c.get(3135, 383), 384.0 * 0.125);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.1 - 0.4);
        let b = Matrix::from_fn(4, 3, |r, c| (r + 2 * c) as f64 * 0.3 - 1.0);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &b.transpose()).unwrap()) < 1e-14);
        let c = Matrix::from_fn(5, 2, |r, c| (r as f64) - (c as f64));
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &c).unwrap()) < 1e-14);
    }

    #[test]
    fn blocked_product_matches_single_call_bitwise() {
        let a = Matrix::from_fn(300, 70, |r, c| ((r * 7 + c * 13) % 17) as f64 / 7.0 - 1.1);
        let b = Matrix::from_fn(70, 90, |r, c| ((r * 5 + c * 3) % 11) as f64 / 3.0 - 1.7);
        let blocked = matmul(&a, &b).unwrap();
        for r in [0, 63, 64, 200, 299] {
            let single = matmul(&gather_rows(&a, &[r]).unwrap(), &b).unwrap();
            assert_eq!(single.row(0), blocked.row(r));
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0, 0.0]])).unwrap();
        for &v in s.row(0) {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
        let s = softmax_rows(&Matrix::from_rows(&[[1000.0, 0.0]])).unwrap();
        assert!(approx(s.get(0, 0), 1.0, 1e-12) && s.get(0, 1) >= 0.0);
        let s = softmax_rows(&Matrix::from_rows(&[[3.0, 2.0]])).unwrap();
        assert!(approx(s.get(0, 0), 0.73106, 1e-5));
        assert!(approx(s.get(0, 1), 0.26894, 1e-5));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_rows(&Matrix::from_rows(&[[f64::NAN, 0.0]])).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_dropped_columns() {
        let x = Matrix::from_rows(&[[3.0, 1.0, 2.0]]);
        let g = masked_softmax_rows(&x, &[vec![0, 2]]).unwrap();
        assert_eq!(g.get(0, 1), 0.0);
        assert!(approx(g.get(0, 0), 0.73106, 1e-5));
        assert!(approx(g.get(0, 2), 0.26894, 1e-5));
        let full = masked_softmax_rows(&x, &[vec![2, 0, 1]]).unwrap();
        assert_eq!(full, softmax_rows(&x).unwrap());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Matrix::filled(1, 2, 1.0);
        let zeros = Matrix::zeros(1, 2);
        let y = layer_norm(&Matrix::from_rows(&[[5.0, 5.0]]), &ones, &zeros, 1e-6).unwrap();
        assert_eq!(y.row(0), &[0.0, 0.0]);
        let y = layer_norm(&Matrix::from_rows(&[[1.0, 3.0]]), &ones, &zeros, 1e-15).unwrap();
        assert!(approx(y.get(0, 0), -1.0, 1e-12) && approx(y.get(0, 1), 1.0, 1e-12));
        let bias = Matrix::row_vector(&[0.5, -2.0]);
        let y = layer_norm(&Matrix::from_rows(&[[1.0, 3.0], [7.0, -1.0]]), &zeros, &bias, 1e-6)
            .unwrap();
        assert_eq!(y.row(0), bias.row(0));
        assert_eq!(y.row(1), bias.row(0));
    }

    #[test]
    fn layer_norm_rejects_empty_rows_and_bad_eps() {
        let e = Matrix::zeros(2, 0);
        assert!(layer_norm(&e, &e, &e, 1e-6).is_err());
        let x = Matrix::zeros(1, 2);
        let g = Matrix::zeros(1, 2);
        assert!(layer_norm(&x, &g, &g, 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&Matrix::row_vector(&[0.0, 1.0, 12.0]));
        assert_eq!(y.get(0, 0), 0.0);
        assert!(approx(y.get(0, 1), 0.84134, 1e-4));
        assert!(approx(y.get(0, 2), 12.0, 1e-6));
    }

    #[test]
    fn gelu_is_monotone_on_grid() {
        // GELU has its minimum near -0.7518, so monotonicity holds to the right of it.
        let xs: Vec<f64> = (0..4000).map(|i| -0.75 + i as f64 * 0.005).collect();
        let y = gelu(&Matrix::row_vector(&xs));
        assert!(y.as_slice().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn scatter_inverts_gather() {
        let x = Matrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64);
        let idx = [4, 1, 3];
        let g = gather_rows(&x, &idx).unwrap();
        let s = scatter_rows(&g, &idx, 5).unwrap();
        for &i in &idx {
            assert_eq!(s.row(i), x.row(i));
        }
        assert_eq!(s.row(0), &[0.0, 0.0]);
        assert!(gather_rows(&x, &[5]).is_err());
    }

    #[test]
    fn canonical_order_sorts_rows() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [0.0, 5.0], [1.0, -1.0]]);
        assert_eq!(canonical_row_order(&x), vec![1, 2, 0]);
    }
}
