//! Arnoldi factorisation with full reorthogonalisation and the shift-invariant
//! multishift solve built on it.

use nalgebra::{DMatrix, DVector};

/// `K V_n = V_{n+1} T̄_n` with orthonormal `V_{n+1}`.
#[derive(Debug, Clone)]
pub struct ArnoldiData {
    /// `N × (n+1)` orthonormal basis. After a breakdown the last column is zero.
    pub v: DMatrix<f64>,
    /// `(n+1) × n` upper Hessenberg matrix.
    pub t_bar: DMatrix<f64>,
    /// Norm of the starting vector.
    pub beta: f64,
    /// The Krylov space became invariant before `n` steps.
    pub breakdown: bool,
}

impl ArnoldiData {
    pub fn steps(&self) -> usize {
        self.t_bar.ncols()
    }

    /// Square part `T_n`.
    pub fn t_square(&self) -> DMatrix<f64> {
        let n = self.steps();
        self.t_bar.view((0, 0), (n, n)).into_owned()
    }
}

/// Incrementally built orthonormal basis; optionally every new direction is
/// also projected out of a fixed orthonormal block `C`.
pub(crate) struct ArnoldiBuilder<'a> {
    pub basis: Vec<DVector<f64>>,
    pub h_cols: Vec<Vec<f64>>,
    pub f_cols: Vec<DVector<f64>>,
    pub breakdown: bool,
    deflate: Option<&'a DMatrix<f64>>,
}

impl<'a> ArnoldiBuilder<'a> {
    /// Starts from `v0 / ‖v0‖`; returns the builder and `‖v0‖`.
    pub fn new(v0: &DVector<f64>, deflate: Option<&'a DMatrix<f64>>) -> (Self, f64) {
        let beta = v0.norm();
        let first = if beta > 0.0 { v0 / beta } else { v0.clone() };
        (
            Self { basis: vec![first], h_cols: Vec::new(), f_cols: Vec::new(), breakdown: beta == 0.0, deflate },
            beta,
        )
    }

    pub fn steps(&self) -> usize {
        self.h_cols.len()
    }

    /// One Arnoldi step with operator `apply`; returns the new Hessenberg column
    /// (length `steps + 1` after the call, i.e. `j + 2` entries).
    pub fn step(&mut self, apply: impl Fn(&DVector<f64>) -> DVector<f64>) -> &[f64] {
        let j = self.h_cols.len();
        let mut w = apply(&self.basis[j]);
        let wnorm = w.norm();
        if let Some(c) = self.deflate {
            let mut f = c.tr_mul(&w);
            w.gemv(-1.0, c, &f, 1.0);
            let f2 = c.tr_mul(&w);
            w.gemv(-1.0, c, &f2, 1.0);
            f += f2;
            self.f_cols.push(f);
        }
        let mut h = vec![0.0; j + 2];
        for _pass in 0..2 {
            for (i, q) in self.basis.iter().enumerate() {
                let hij = q.dot(&w);
                h[i] += hij;
                w.axpy(-hij, q, 1.0);
            }
        }
        let hn = w.norm();
        h[j + 1] = hn;
        if hn <= 1e-13 * wnorm.max(f64::MIN_POSITIVE) {
            self.breakdown = true;
            h[j + 1] = 0.0;
            self.basis.push(DVector::zeros(w.len()));
        } else {
            self.basis.push(w / hn);
        }
        self.h_cols.push(h);
        self.h_cols.last().unwrap()
    }

    /// `N × count` matrix of the first `count` basis vectors.
    pub fn basis_matrix(&self, count: usize) -> DMatrix<f64> {
        let n = self.basis[0].len();
        let mut out = DMatrix::zeros(n, count);
        for (c, v) in self.basis.iter().take(count).enumerate() {
            out.set_column(c, v);
        }
        out
    }

    pub fn hessenberg(&self) -> DMatrix<f64> {
        let n = self.h_cols.len();
        let mut t = DMatrix::zeros(n + 1, n);
        for (c, col) in self.h_cols.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                t[(r, c)] = *v;
            }
        }
        t
    }

    pub fn into_data(self, beta: f64) -> ArnoldiData {
        let n = self.h_cols.len();
        ArnoldiData { v: self.basis_matrix(n + 1), t_bar: self.hessenberg(), beta, breakdown: self.breakdown }
    }
}

/// Runs `n` steps of Arnoldi on `apply` starting from `b`.
pub fn arnoldi(apply: impl Fn(&DVector<f64>) -> DVector<f64>, b: &DVector<f64>, n: usize) -> ArnoldiData {
    let (mut builder, beta) = ArnoldiBuilder::new(b, None);
    while builder.steps() < n && !builder.breakdown {
        builder.step(&apply);
    }
    builder.into_data(beta)
}

/// Least-squares problem `min ‖β e₁ − H̄ y‖` over a growing Hessenberg matrix,
/// kept in triangular form with Givens rotations.
#[derive(Debug, Clone)]
pub(crate) struct GivensLsq {
    rot: Vec<(f64, f64)>,
    r_cols: Vec<Vec<f64>>,
    g: Vec<f64>,
}

impl GivensLsq {
    pub fn new(beta: f64) -> Self {
        Self { rot: Vec::new(), r_cols: Vec::new(), g: vec![beta] }
    }

    /// Appends a Hessenberg column with `j + 2` entries; returns the updated residual norm.
    pub fn push(&mut self, mut h: Vec<f64>) -> f64 {
        let j = self.r_cols.len();
        debug_assert_eq!(h.len(), j + 2);
        for (i, &(c, s)) in self.rot.iter().enumerate() {
            let (a, b) = (h[i], h[i + 1]);
            h[i] = c * a + s * b;
            h[i + 1] = -s * a + c * b;
        }
        let (a, b) = (h[j], h[j + 1]);
        let r = a.hypot(b);
        let (c, s) = if r == 0.0 { (1.0, 0.0) } else { (a / r, b / r) };
        h[j] = r;
        h.truncate(j + 1);
        self.rot.push((c, s));
        self.r_cols.push(h);
        let gj = self.g[j];
        self.g[j] = c * gj;
        self.g.push(-s * gj);
        self.residual()
    }

    pub fn residual(&self) -> f64 {
        self.g.last().unwrap().abs()
    }

    pub fn len(&self) -> usize {
        self.r_cols.len()
    }

    /// Minimiser of the current problem; singular pivots contribute zero.
    pub fn solve(&self) -> DVector<f64> {
        let k = self.r_cols.len();
        let mut y = DVector::zeros(k);
        for i in (0..k).rev() {
            let mut s = self.g[i];
            for j in (i + 1)..k {
                s -= self.r_cols[j][i] * y[j];
            }
            let d = self.r_cols[i][i];
            y[i] = if d == 0.0 { 0.0 } else { s / d };
        }
        y
    }
}

/// Output of the shift-invariant phase.
#[derive(Debug, Clone)]
pub struct MultishiftResult {
    pub arnoldi: ArnoldiData,
    /// Per-shift approximations `x̃_{0,j} = V_n y_j`.
    pub x0: Vec<DVector<f64>>,
    /// Least-squares residual norms `‖b − (K + σ_j I) x̃_{0,j}‖`.
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
}

/// One Arnoldi cycle of at most `n` steps shared by every shift in `sigmas`,
/// solving `(K + σ_j I) x = b`. Stops early once every shift meets `tol`
/// (relative to `‖b‖`) or on breakdown.
pub fn multishift_gmres(
    apply_k: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    sigmas: &[f64],
    n: usize,
    tol: f64,
) -> MultishiftResult {
    let (mut builder, beta) = ArnoldiBuilder::new(b, None);
    let mut lsq: Vec<GivensLsq> = sigmas.iter().map(|_| GivensLsq::new(beta)).collect();
    let target = tol * beta;
    while builder.steps() < n && !builder.breakdown {
        let j = builder.steps();
        let h = builder.step(&apply_k).to_vec();
        let mut all = true;
        for (ls, &sigma) in lsq.iter_mut().zip(sigmas) {
            let mut col = h.clone();
            col[j] += sigma;
            all &= ls.push(col) <= target;
        }
        if all {
            break;
        }
    }
    let data = builder.into_data(beta);
    let steps = data.steps();
    let vn = data.v.columns(0, steps);
    let x0 = lsq.iter().map(|ls| if steps == 0 { DVector::zeros(b.len()) } else { &vn * ls.solve() }).collect();
    let residuals: Vec<f64> = lsq.iter().map(|ls| ls.residual()).collect();
    let converged = residuals.iter().map(|&r| r <= target).collect();
    MultishiftResult { arnoldi: data, x0, residuals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_principal_angle_sin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64 * 0.1)
    }

    #[test]
    fn arnoldi_relation_and_orthogonality() {
        let k = random_spd(60, 1);
        let b = DVector::from_fn(60, |i, _| (i as f64 * 0.37).sin() + 1.0);
        let data = arnoldi(|x| &k * x, &b, 25);
        let v = &data.v;
        let gram = v.transpose() * v;
        assert!((gram - DMatrix::identity(26, 26)).amax() < 1e-10);
        let lhs = &k * v.columns(0, 25);
        let rhs = v * &data.t_bar;
        let knorm = k.norm();
        for c in 0..25 {
            assert!((lhs.column(c) - rhs.column(c)).norm() <= 1e-10 * knorm);
        }
    }

    #[test]
    fn identity_converges_in_one_step() {
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let res = multishift_gmres(|x| x.clone(), &b, &[0.5], 10, 1e-12);
        assert_eq!(res.arnoldi.steps(), 1);
        assert!((&res.x0[0] - &b / 1.5).norm() < 1e-14);
        assert!(res.converged[0]);
    }

    #[test]
    fn lsq_residual_matches_explicit_residual() {
        let k = random_spd(50, 2);
        let b = DVector::from_fn(50, |i, _| 1.0 / (1.0 + i as f64));
        let sigmas = [0.0, 0.3, 2.0];
        let res = multishift_gmres(|x| &k * x, &b, &sigmas, 12, 1e-14);
        for (j, &s) in sigmas.iter().enumerate() {
            let explicit = (&b - (&k * &res.x0[j] + &res.x0[j] * s)).norm();
            assert!((explicit - res.residuals[j]).abs() <= 1e-8 * b.norm());
        }
    }

    #[test]
    fn multishift_matches_dense_solves() {
        let k = random_spd(40, 3);
        let b = DVector::from_fn(40, |i, _| ((i * 7) % 5) as f64 - 1.5);
        let sigmas = [0.1, 1.7];
        let res = multishift_gmres(|x| &k * x, &b, &sigmas, 40, 1e-10);
        for (j, &s) in sigmas.iter().enumerate() {
            assert!(res.converged[j]);
            let a = &k + DMatrix::identity(40, 40) * s;
            let exact = a.lu().solve(&b).unwrap();
            assert!((&res.x0[j] - &exact).norm() <= 1e-8 * exact.norm());
        }
    }

    #[test]
    fn krylov_space_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = DMatrix::from_fn(30, 30, |_, _| rng.random::<f64>());
        let b = DVector::from_fn(30, |_, _| rng.random::<f64>());
        let a = arnoldi(|x| &k * x, &b, 6);
        let shifted = &k + DMatrix::identity(30, 30) * 3.3;
        let s = arnoldi(|x| &shifted * x, &b, 6);
        let sin = max_principal_angle_sin(&a.v.columns(0, 6).into_owned(), &s.v.columns(0, 6).into_owned());
        assert!(sin <= 1e-8, "principal angle sine {sin}");
    }

    #[test]
    fn breakdown_on_invariant_subspace() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let b = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let data = arnoldi(|x| &k * x, &b, 4);
        assert!(data.breakdown);
        assert_eq!(data.steps(), 2);
    }
}
