//! Adaptive cross approximation.

use nalgebra::{DMatrix, DVector};

use super::{LowRankFactor, Method};

/// Entry access for partially pivoted ACA, which never forms the whole block.
pub trait BlockAccess: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn row(&self, i: usize) -> Vec<f64>;
    fn col(&self, j: usize) -> Vec<f64>;
}

impl BlockAccess for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn row(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().copied().collect()
    }
    fn col(&self, j: usize) -> Vec<f64> {
        self.column(j).iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct AcaResult {
    pub factor: LowRankFactor,
    pub steps: usize,
    /// Rows that were visited but produced a zero pivot.
    pub zero_rows: usize,
    /// Every row was visited before the stopping test was met.
    pub exhausted: bool,
    pub flops: u64,
}

/// Relative size below which a residual entry counts as a zero pivot.
const ZERO_PIVOT: f64 = 1e-12;

fn factor_from(us: Vec<DVector<f64>>, vs: Vec<DVector<f64>>, m: usize, n: usize, tol: f64, method: Method) -> LowRankFactor {
    if us.is_empty() {
        return LowRankFactor::zero(m, n, tol, method);
    }
    LowRankFactor { u: DMatrix::from_columns(&us), v: DMatrix::from_columns(&vs), tol, method, full_rank: false }
}

/// Fully pivoted ACA on an explicit matrix.
///
/// Each step pivots on the largest residual entry; stops once that entry is
/// numerically zero or the residual satisfies `‖R‖_F ≤ tol ‖A‖_F`. An exactly
/// rank-`r` matrix therefore terminates after `r` steps for `tol = 0`.
pub fn aca_full(a: &DMatrix<f64>, tol: f64) -> AcaResult {
    let (m, n) = a.shape();
    let scale = a.amax();
    let anorm = a.norm();
    let mut r = a.clone();
    let (mut us, mut vs) = (Vec::new(), Vec::new());
    let mut flops = 0u64;
    while us.len() < m.min(n) {
        let (mut pi, mut pj, mut best) = (0, 0, 0.0f64);
        for j in 0..n {
            for i in 0..m {
                let v = r[(i, j)].abs();
                if v > best {
                    (pi, pj, best) = (i, j, v);
                }
            }
        }
        flops += (m * n) as u64;
        if best <= ZERO_PIVOT * scale || r.norm() <= tol * anorm {
            break;
        }
        let pivot = r[(pi, pj)];
        let u = r.column(pj) / pivot;
        let v = r.row(pi).transpose();
        r.ger(-1.0, &u, &v, 1.0);
        flops += 3 * (m * n) as u64;
        us.push(u);
        vs.push(v);
    }
    let steps = us.len();
    AcaResult { factor: factor_from(us, vs, m, n, tol, Method::AcaFull), steps, zero_rows: 0, exhausted: false, flops }
}

/// Partially pivoted ACA.
///
/// Starts from row 0; each step takes the residual row, pivots on its largest
/// entry, takes the matching residual column and moves to the unused row where
/// the new column is largest. Stops when `‖u_k‖‖v_k‖ ≤ tol ‖S_k‖_F`, with the
/// approximant norm updated incrementally. Rows whose residual vanishes are
/// skipped; exhausting every row ends the loop.
pub fn aca_partial<B: BlockAccess + ?Sized>(block: &B, tol: f64) -> AcaResult {
    let (m, n) = (block.nrows(), block.ncols());
    let mut used = vec![false; m];
    let (mut us, mut vs): (Vec<DVector<f64>>, Vec<DVector<f64>>) = (Vec::new(), Vec::new());
    let mut s_norm2 = 0.0f64;
    let mut scale = 0.0f64;
    let mut zero_rows = 0;
    let mut flops = 0u64;
    let mut next = (m > 0).then_some(0usize);
    let mut converged = false;
    while let Some(i) = next {
        if us.len() >= m.min(n) {
            break;
        }
        used[i] = true;
        let mut row = DVector::from_vec(block.row(i));
        for (u, v) in us.iter().zip(&vs) {
            row.axpy(-u[i], v, 1.0);
        }
        flops += (2 * us.len() * n + n) as u64;
        let (j, best) = row.iter().enumerate().fold((0, 0.0f64), |acc, (j, x)| if x.abs() > acc.1 { (j, x.abs()) } else { acc });
        scale = scale.max(best);
        if best == 0.0 || best <= ZERO_PIVOT * scale {
            zero_rows += 1;
            next = used.iter().position(|u| !u);
            continue;
        }
        let pivot = row[j];
        let v = row / pivot;
        let mut u = DVector::from_vec(block.col(j));
        for (uk, vk) in us.iter().zip(&vs) {
            u.axpy(-vk[j], uk, 1.0);
        }
        let (un, vn) = (u.norm(), v.norm());
        let mut cross = 0.0;
        for (uk, vk) in us.iter().zip(&vs) {
            cross += uk.dot(&u) * vk.dot(&v);
        }
        s_norm2 += un * un * vn * vn + 2.0 * cross;
        flops += (2 * us.len() * m + m + 4 * us.len() * (m + n) + 2 * (m + n)) as u64;
        let mut pick = None;
        let mut pick_val = -1.0;
        for (r, x) in u.iter().enumerate() {
            if !used[r] && x.abs() > pick_val {
                pick = Some(r);
                pick_val = x.abs();
            }
        }
        us.push(u);
        vs.push(v);
        if un * vn <= tol * s_norm2.max(0.0).sqrt() {
            converged = true;
            break;
        }
        next = pick;
    }
    let steps = us.len();
    let exhausted = !converged && steps < m.min(n);
    AcaResult { factor: factor_from(us, vs, m, n, tol, Method::AcaPartial), steps, zero_rows, exhausted, flops }
}
