//! Small dense helpers shared by the solver, compression and reconstruction code.

use nalgebra::{DMatrix, DVector};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Thin QR by modified Gram-Schmidt with one reorthogonalisation pass.
///
/// Columns whose remaining norm falls below `drop_tol` times their original
/// norm are discarded. Returns `(Q, R, kept)` with `A[:, kept] = Q R`.
pub fn mgs_qr(a: &DMatrix<f64>, drop_tol: f64) -> (DMatrix<f64>, DMatrix<f64>, Vec<usize>) {
    let (m, n) = a.shape();
    let mut q_cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut r_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut kept = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: DVector<f64> = a.column(j).into_owned();
        let orig = v.norm();
        let mut coeffs = vec![0.0; q_cols.len()];
        for _pass in 0..2 {
            for (i, q) in q_cols.iter().enumerate() {
                let h = q.dot(&v);
                coeffs[i] += h;
                v.axpy(-h, q, 1.0);
            }
        }
        let nv = v.norm();
        if orig == 0.0 || nv <= drop_tol * orig {
            continue;
        }
        v /= nv;
        coeffs.push(nv);
        q_cols.push(v);
        r_cols.push(coeffs);
        kept.push(j);
    }
    let k = q_cols.len();
    let q = if k == 0 { DMatrix::zeros(m, 0) } else { DMatrix::from_columns(&q_cols) };
    let mut r = DMatrix::zeros(k, k);
    for (c, col) in r_cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            r[(i, c)] = *v;
        }
    }
    (q, r, kept)
}

/// Householder thin QR.
pub fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    if a.ncols() == 0 {
        return (DMatrix::zeros(a.nrows(), 0), DMatrix::zeros(0, 0));
    }
    let qr = a.clone().qr();
    (qr.q(), qr.r())
}

/// Solves `R x = b` for upper triangular `R`.
pub fn solve_upper(r: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = r.ncols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Solves `Rᵀ x = b` for upper triangular `R`.
pub fn solve_upper_transpose(r: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = r.ncols();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= r[(j, i)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// `A R⁻¹` for upper triangular `R`, by columns.
pub fn right_solve_upper(a: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let k = r.ncols();
    let mut out = DMatrix::zeros(a.nrows(), k);
    for j in 0..k {
        let mut col: DVector<f64> = a.column(j).into_owned();
        for i in 0..j {
            let rij = r[(i, j)];
            if rij != 0.0 {
                col.axpy(-rij, &out.column(i).into_owned(), 1.0);
            }
        }
        col /= r[(j, j)];
        out.set_column(j, &col);
    }
    out
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Sine of the largest principal angle between the column spans of `a` and `b`.
pub fn max_principal_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (qa, _, _) = mgs_qr(a, 1e-14);
    let (qb, _, _) = mgs_qr(b, 1e-14);
    let proj = &qb - &qa * (qa.transpose() * &qb);
    let s1 = spectral_norm(&proj);
    let proj2 = &qa - &qb * (qb.transpose() * &qa);
    s1.max(spectral_norm(&proj2))
}

/// Minimum-norm least squares through the SVD. Returns the solution and the numerical rank.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> (DVector<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let smax = svd.singular_values.max();
    let mut x = DVector::zeros(a.ncols());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && s > rcond * smax {
            rank += 1;
            let coef = u.column(i).dot(b) / s;
            x.axpy(coef, &vt.row(i).transpose(), 1.0);
        }
    }
    (x, rank)
}

/// Number of leading singular values needed so the discarded Frobenius tail is at most `tol`.
pub fn frobenius_rank(sorted_desc: &[f64], tol: f64) -> usize {
    let mut tail = 0.0;
    let mut r = sorted_desc.len();
    while r > 0 {
        let next = tail + sorted_desc[r - 1] * sorted_desc[r - 1];
        if next.sqrt() > tol {
            break;
        }
        tail = next;
        r -= 1;
    }
    r
}
