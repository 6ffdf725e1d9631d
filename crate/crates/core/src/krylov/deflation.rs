//! Harmonic Ritz extraction, the recycled pair `K U = C`, and its cheap
//! per-shift update.

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::arnoldi::ArnoldiData;
use crate::linalg::{mgs_qr, right_solve_upper, solve_upper};

/// Harmonic Ritz pairs of the Arnoldi pencil `T̄ᵀT̄ z = θ Tᵀ z`.
#[derive(Debug, Clone)]
pub struct HarmonicRitz {
    /// `n × k`, unit-norm columns.
    pub z: DMatrix<f64>,
    pub theta: Vec<f64>,
    /// `T̄ᵀT̄` was singular and had to be shifted by a multiple of machine epsilon.
    pub shifted_pencil: bool,
}

/// The `k` harmonic Ritz pairs of smallest `|θ|`.
///
/// The operator the basis came from is symmetric, so `T` is symmetrised before
/// the pencil is reduced to a symmetric standard problem through the Cholesky
/// factor of `T̄ᵀT̄`.
pub fn harmonic_ritz(data: &ArnoldiData, k: usize) -> HarmonicRitz {
    let n = data.steps();
    let k = k.min(n);
    if k == 0 {
        return HarmonicRitz { z: DMatrix::zeros(n, 0), theta: Vec::new(), shifted_pencil: false };
    }
    let t = data.t_square();
    let t = (&t + t.transpose()) * 0.5;
    let mut b = data.t_bar.tr_mul(&data.t_bar);
    let mut shifted_pencil = false;
    let chol = match b.clone().cholesky() {
        Some(c) => c,
        None => {
            shifted_pencil = true;
            let bump = f64::EPSILON * b.norm().max(f64::MIN_POSITIVE) * n as f64;
            warn!("harmonic Ritz pencil is singular; shifting by {bump:.3e}");
            let mut tries = 0;
            loop {
                for i in 0..n {
                    b[(i, i)] += bump * 10f64.powi(tries);
                }
                if let Some(c) = b.clone().cholesky() {
                    break c;
                }
                tries += 1;
                assert!(tries < 20, "could not regularise harmonic Ritz pencil");
            }
        }
    };
    let l = chol.l();
    // S = L⁻¹ T L⁻ᵀ
    let x = l.solve_lower_triangular(&t).expect("nonsingular Cholesky factor");
    let s = l.solve_lower_triangular(&x.transpose()).expect("nonsingular Cholesky factor");
    let s = (&s + s.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().partial_cmp(&eig.eigenvalues[a].abs()).unwrap());
    let lt = l.transpose();
    let mut z = DMatrix::zeros(n, k);
    let mut theta = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let w: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let zc = lt.solve_upper_triangular(&w).expect("nonsingular Cholesky factor");
        let nz = zc.norm();
        z.set_column(c, &(zc / nz));
        let mu = eig.eigenvalues[idx];
        theta.push(if mu == 0.0 { f64::INFINITY } else { 1.0 / mu });
    }
    HarmonicRitz { z, theta, shifted_pencil }
}

/// Recycled pair for the base operator: `K̂ U = C`, `CᵀC = I`, plus the
/// shift-independent products and Gram blocks used by [`update_deflation`].
#[derive(Debug, Clone)]
pub struct DeflationBasis {
    pub u: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `M̂ U`; `None` when the transformed mass is the identity.
    pub m_u: Option<DMatrix<f64>>,
    pub r_u: DMatrix<f64>,
    c_mu: DMatrix<f64>,
    c_ru: DMatrix<f64>,
    mu_mu: DMatrix<f64>,
    ru_ru: DMatrix<f64>,
    ru_mu: DMatrix<f64>,
    /// Columns dropped because the harmonic Ritz vectors were numerically dependent.
    pub dropped: usize,
}

impl DeflationBasis {
    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn empty(n: usize) -> Self {
        let z = || DMatrix::zeros(0, 0);
        Self {
            u: DMatrix::zeros(n, 0),
            c: DMatrix::zeros(n, 0),
            m_u: None,
            r_u: DMatrix::zeros(n, 0),
            c_mu: z(),
            c_ru: z(),
            mu_mu: z(),
            ru_ru: z(),
            ru_mu: z(),
            dropped: 0,
        }
    }

    fn mass_u(&self) -> &DMatrix<f64> {
        self.m_u.as_ref().unwrap_or(&self.u)
    }
}

/// Builds `U`, `C` from harmonic Ritz vectors: with `Ỹ = V_n Z` the Arnoldi
/// relation gives `K̂ Ỹ = V_{n+1} T̄ Z`; a QR of the latter yields `C` and
/// `U = Ỹ Y⁻¹`.
///
/// `apply_r` applies the Robin operator, `mass_diag` the transformed mass when
/// it is not the identity.
pub fn build_deflation_basis(
    data: &ArnoldiData,
    ritz: &HarmonicRitz,
    apply_r: impl Fn(&DVector<f64>) -> DVector<f64>,
    mass_diag: Option<&[f64]>,
) -> DeflationBasis {
    let n_rows = data.v.nrows();
    let k = ritz.z.ncols();
    if k == 0 {
        return DeflationBasis::empty(n_rows);
    }
    let steps = data.steps();
    let y_tilde = data.v.columns(0, steps) * &ritz.z;
    let c_prime = &data.v * (&data.t_bar * &ritz.z);
    let (q, r, kept) = mgs_qr(&c_prime, 1e-10);
    let dropped = k - kept.len();
    if dropped > 0 {
        warn!("deflation basis lost {dropped} dependent columns");
    }
    let y_kept = y_tilde.select_columns(&kept);
    let u = right_solve_upper(&y_kept, &r);
    let c = q;
    let kk = u.ncols();
    let mut r_u = DMatrix::zeros(n_rows, kk);
    for j in 0..kk {
        r_u.set_column(j, &apply_r(&u.column(j).into_owned()));
    }
    let m_u = mass_diag.map(|d| {
        let mut mu = u.clone();
        for (i, mut row) in mu.row_iter_mut().enumerate() {
            row *= d[i];
        }
        mu
    });
    let mass_u = m_u.as_ref().unwrap_or(&u);
    DeflationBasis {
        c_mu: c.tr_mul(mass_u),
        c_ru: c.tr_mul(&r_u),
        mu_mu: mass_u.tr_mul(mass_u),
        ru_ru: r_u.tr_mul(&r_u),
        ru_mu: r_u.tr_mul(mass_u),
        u,
        c,
        m_u,
        r_u,
        dropped,
    }
}

/// Per-shift pair `A_j U_j = C_j` with `U_j = U F⁻¹` kept implicit.
#[derive(Debug, Clone)]
pub struct ShiftDeflation {
    pub c: DMatrix<f64>,
    /// Upper triangular factor with `C'_j = C_j F`.
    pub f: DMatrix<f64>,
    /// The Gram/Cholesky route failed and an explicit QR was used.
    pub fallback_qr: bool,
}

impl ShiftDeflation {
    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    /// `U_j y = U (F⁻¹ y)`.
    pub fn apply_u(&self, basis: &DeflationBasis, y: &DVector<f64>) -> DVector<f64> {
        &basis.u * solve_upper(&self.f, y)
    }
}

/// Updates the recycled pair for `A_j = K̂ + σ M̂ + σ' R̂`.
///
/// `C'_j = C + σ M̂U + σ' R̂U`; its Gram matrix is assembled from cached `k × k`
/// blocks, factored as `FᵀF`, and `C_j = C'_j F⁻¹`. Falls back to an explicit
/// QR of `C'_j` if the Cholesky factor is missing or badly conditioned.
pub fn update_deflation(basis: &DeflationBasis, sigma: f64, sigma_p: f64) -> ShiftDeflation {
    let k = basis.dim();
    let n_rows = basis.c.nrows();
    if k == 0 {
        return ShiftDeflation { c: DMatrix::zeros(n_rows, 0), f: DMatrix::zeros(0, 0), fallback_qr: false };
    }
    let mu = basis.mass_u();
    let c_prime = &basis.c + mu * sigma + &basis.r_u * sigma_p;
    let sym = |a: &DMatrix<f64>| a + a.transpose();
    let gram = DMatrix::identity(k, k)
        + sym(&basis.c_mu) * sigma
        + sym(&basis.c_ru) * sigma_p
        + sym(&basis.ru_mu) * (sigma * sigma_p)
        + &basis.mu_mu * (sigma * sigma)
        + &basis.ru_ru * (sigma_p * sigma_p);
    if let Some(chol) = gram.cholesky() {
        let f = chol.l().transpose();
        let diag = f.diagonal();
        let (lo, hi) = (diag.min(), diag.max());
        if lo > 1e-4 * hi {
            let c = right_solve_upper(&c_prime, &f);
            return ShiftDeflation { c, f, fallback_qr: false };
        }
    }
    warn!("deflation update for shift ({sigma:.3e}, {sigma_p:.3e}) fell back to explicit QR");
    let (q, r) = crate::linalg::thin_qr(&c_prime);
    ShiftDeflation { c: q, f: r, fallback_qr: true }
}
