//! Recycled Krylov solver for the wavelength family `(K + σ_j M + σ'_j R) x_j = b`.
//!
//! The family is first rescaled symmetrically by `M^{-1/2}` (lumped mass), turning
//! the mass term into the identity so that one Arnoldi basis of the base
//! operator serves every shift. That basis gives per-shift starting guesses and
//! a deflation pair `K̂ U = C`, which is cheaply adapted to every shift and used
//! to augment a restarted GMRES per wavelength.

mod arnoldi;
mod deflation;
mod gmres;

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

pub use arnoldi::{arnoldi, multishift_gmres, ArnoldiData, MultishiftResult};
pub use deflation::{build_deflation_basis, harmonic_ritz, update_deflation, DeflationBasis, HarmonicRitz, ShiftDeflation};
pub use gmres::{augmented_gmres, GmresStats};

use crate::optics::center_shift_transform;
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Symmetric diagonal scaling applied before the Krylov iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    /// `M^{-1/2}` with the lumped mass: exact shift invariance.
    #[default]
    None,
    /// `P^{-1/2}` with `P = diag(K + σ̄ M + σ̄' R)`. The transformed mass is no
    /// longer the identity, so the shared phase only yields approximate starting
    /// guesses; the per-shift phase stays exact.
    Jacobi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Arnoldi steps of the shared phase.
    pub n_arnoldi: usize,
    /// Number of recycled vectors.
    pub k: usize,
    /// Restart length of the augmented GMRES (inner steps are `m − k`).
    pub m: usize,
    pub tol: f64,
    pub max_restarts: usize,
    /// Fold the mean Robin shift into the base operator.
    pub center: bool,
    pub preconditioner: Preconditioner,
    /// Solve the wavelengths on the rayon pool.
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_arnoldi: 80,
            k: 10,
            m: 50,
            tol: 1e-8,
            max_restarts: 200,
            center: true,
            preconditioner: Preconditioner::None,
            parallel: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k >= self.m {
            return Err(Error::InvalidArgument(format!("deflation size k = {} must be below restart m = {}", self.k, self.m)));
        }
        if self.k > self.n_arnoldi {
            return Err(Error::InvalidArgument("k cannot exceed the Arnoldi length".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::InvalidArgument(format!("tolerance {} outside (0, 1)", self.tol)));
        }
        Ok(())
    }
}

/// Per-wavelength outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemStats {
    pub iters: usize,
    pub matvecs: usize,
    pub relres: f64,
    pub converged: bool,
    pub fallback_qr: bool,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FamilySolution {
    /// Solutions in the original (unscaled) variables, one per shift.
    pub x: Vec<Vec<f64>>,
    pub stats: Vec<SystemStats>,
    pub phase1_steps: usize,
    pub phase1_residuals: Vec<f64>,
    pub deflation_dim: usize,
    pub pencil_shifted: bool,
}

impl FamilySolution {
    pub fn total_iters(&self) -> usize {
        self.stats.iter().map(|s| s.iters).sum()
    }

    pub fn total_matvecs(&self) -> usize {
        self.phase1_steps + self.stats.iter().map(|s| s.matvecs).sum::<usize>()
    }

    /// First unconverged system, as an error.
    pub fn check(&self) -> Result<()> {
        match self.stats.iter().position(|s| !s.converged) {
            Some(index) => Err(Error::NotConverged { index, relres: self.stats[index].relres }),
            None => Ok(()),
        }
    }
}

/// Scaled operators for one family of shifts; reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct FamilySolver {
    /// Scaling `D`: original `x = D x̂`, `b̂ = D b`.
    scale: Vec<f64>,
    k_hat: CsrMatrix,
    r_hat: CsrMatrix,
    m_hat: Option<Vec<f64>>,
    m_mean: f64,
    sigma: Vec<f64>,
    sigma_p: Vec<f64>,
    config: SolverConfig,
}

impl FamilySolver {
    /// `shifts[j] = (σ_j, σ'_j)`; `m_lumped` is the lumped mass diagonal.
    pub fn new(k: &CsrMatrix, m_lumped: &[f64], r: &CsrMatrix, shifts: &[(f64, f64)], config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let n = k.dim();
        if m_lumped.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: m_lumped.len() });
        }
        if r.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, got: r.dim() });
        }
        if shifts.is_empty() {
            return Err(Error::InvalidArgument("no shifts".into()));
        }
        if m_lumped.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidArgument("lumped mass must be positive".into()));
        }
        let sigma: Vec<f64> = shifts.iter().map(|s| s.0).collect();
        let raw_p: Vec<f64> = shifts.iter().map(|s| s.1).collect();
        let (center, sigma_p) = if config.center { center_shift_transform(&raw_p) } else { (0.0, raw_p) };
        let base = if center != 0.0 { CsrMatrix::linear_combination(&[(1.0, k), (center, r)]) } else { k.clone() };
        let (scale, m_hat) = match config.preconditioner {
            Preconditioner::None => (m_lumped.iter().map(|m| 1.0 / m.sqrt()).collect::<Vec<f64>>(), None),
            Preconditioner::Jacobi => {
                let sbar = sigma.iter().sum::<f64>() / sigma.len() as f64;
                let spbar = shifts.iter().map(|s| s.1).sum::<f64>() / shifts.len() as f64;
                let (kd, rd) = (k.diagonal(), r.diagonal());
                let p: Vec<f64> = (0..n).map(|i| kd[i] + sbar * m_lumped[i] + spbar * rd[i]).collect();
                if p.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::InvalidArgument("Jacobi diagonal is not positive".into()));
                }
                let d: Vec<f64> = p.iter().map(|v| 1.0 / v.sqrt()).collect();
                let mh = (0..n).map(|i| m_lumped[i] * d[i] * d[i]).collect();
                (d, Some(mh))
            }
        };
        let m_mean = m_hat.as_ref().map_or(1.0, |m: &Vec<f64>| m.iter().sum::<f64>() / n as f64);
        Ok(Self {
            k_hat: base.scale_symmetric(&scale),
            r_hat: r.scale_symmetric(&scale),
            scale,
            m_hat,
            m_mean,
            sigma,
            sigma_p,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn num_shifts(&self) -> usize {
        self.sigma.len()
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn apply_base(&self, x: &DVector<f64>) -> DVector<f64> {
        self.k_hat.mul_dvec(x)
    }

    fn apply_shift(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.k_hat.mul_vec(x.as_slice());
        let ry = self.r_hat.mul_vec(x.as_slice());
        let (s, sp) = (self.sigma[j], self.sigma_p[j]);
        match &self.m_hat {
            None => {
                for i in 0..y.len() {
                    y[i] += s * x[i] + sp * ry[i];
                }
            }
            Some(m) => {
                for i in 0..y.len() {
                    y[i] += s * m[i] * x[i] + sp * ry[i];
                }
            }
        }
        DVector::from_vec(y)
    }

    /// Residual `‖b − A_j x‖ / ‖b‖` in the scaled variables for an original-variable `x`.
    pub fn relative_residual(&self, j: usize, b: &[f64], x: &[f64]) -> f64 {
        let bh = DVector::from_fn(b.len(), |i, _| self.scale[i] * b[i]);
        let xh = DVector::from_fn(x.len(), |i, _| x[i] / self.scale[i]);
        (&bh - self.apply_shift(j, &xh)).norm() / bh.norm()
    }

    /// Solves every shifted system for right-hand side `b`.
    pub fn solve(&self, b: &[f64]) -> Result<FamilySolution> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        let cfg = &self.config;
        let bh = DVector::from_fn(n, |i, _| self.scale[i] * b[i]);
        let phase1_sigmas: Vec<f64> = self.sigma.iter().map(|s| s * self.m_mean).collect();
        let ms = multishift_gmres(|x| self.apply_base(x), &bh, &phase1_sigmas, cfg.n_arnoldi, cfg.tol);
        let ritz = harmonic_ritz(&ms.arnoldi, cfg.k);
        let basis = build_deflation_basis(
            &ms.arnoldi,
            &ritz,
            |x| self.r_hat.mul_dvec(x),
            self.m_hat.as_deref(),
        );
        let solve_one = |j: usize| {
            let defl = update_deflation(&basis, self.sigma[j], self.sigma_p[j]);
            let (xh, st) = augmented_gmres(
                |x| self.apply_shift(j, x),
                &bh,
                ms.x0[j].clone(),
                &basis,
                &defl,
                cfg.m,
                cfg.tol,
                cfg.max_restarts,
            );
            let x: Vec<f64> = xh.iter().zip(&self.scale).map(|(v, d)| v * d).collect();
            let stats = SystemStats {
                iters: st.iters,
                matvecs: st.matvecs,
                relres: st.relres,
                converged: st.converged,
                fallback_qr: defl.fallback_qr,
                history: st.history,
            };
            (x, stats)
        };
        let results: Vec<(Vec<f64>, SystemStats)> = if cfg.parallel {
            (0..self.num_shifts()).into_par_iter().map(solve_one).collect()
        } else {
            (0..self.num_shifts()).map(solve_one).collect()
        };
        let (x, stats) = results.into_iter().unzip();
        Ok(FamilySolution {
            x,
            stats,
            phase1_steps: ms.arnoldi.steps(),
            phase1_residuals: ms.residuals.iter().map(|r| r / bh.norm().max(f64::MIN_POSITIVE)).collect(),
            deflation_dim: basis.dim(),
            pencil_shifted: ritz.shifted_pencil,
        })
    }
}

/// One-shot convenience wrapper around [`FamilySolver`].
pub fn solve_family(
    k: &CsrMatrix,
    m_lumped: &[f64],
    r: &CsrMatrix,
    b: &[f64],
    shifts: &[(f64, f64)],
    config: SolverConfig,
) -> Result<FamilySolution> {
    FamilySolver::new(k, m_lumped, r, shifts, config)?.solve(b)
}

/// Writes per-system telemetry: `wavelength_nm,sigma,sigma_prime,iters,matvecs,final_relres`.
pub fn write_telemetry<W: Write>(out: &mut W, lambdas: &[f64], shifts: &[(f64, f64)], stats: &[SystemStats]) -> Result<()> {
    writeln!(out, "wavelength_nm,sigma,sigma_prime,iters,matvecs,final_relres")?;
    for ((l, (s, sp)), st) in lambdas.iter().zip(shifts).zip(stats) {
        writeln!(out, "{l},{s:e},{sp:e},{},{},{:e}", st.iters, st.matvecs, st.relres)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FemMatrices, Grid};
    use crate::optics::{shifts, wavelength_grid, ChromophoreTable, OpticalParams};
    use crate::sparse::BandCholesky;

    fn fixture(nv: usize, count: usize) -> (Grid, FemMatrices, Vec<f64>, Vec<(f64, f64)>) {
        let g = Grid::new(nv, nv, nv, 2.0, 2.0, 3.0).unwrap();
        let fem = FemMatrices::assemble(&g);
        let mut b = g.point_source_vector([0.1, -0.2, 3.0]).unwrap();
        fem.apply_dirichlet_rhs(&mut b);
        let table = ChromophoreTable::bundled();
        let p = OpticalParams::default();
        let sh = wavelength_grid(620.0, 980.0, count).iter().map(|&l| shifts(l, &table, &p).unwrap()).collect();
        (g, fem, b, sh)
    }

    fn direct(fem: &FemMatrices, b: &[f64], s: (f64, f64)) -> Vec<f64> {
        BandCholesky::factor(&fem.system_matrix(s.0, s.1)).unwrap().solve(b)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn family_matches_direct_solves() {
        let (_, fem, b, sh) = fixture(10, 8);
        let cfg = SolverConfig { n_arnoldi: 30, ..SolverConfig::default() };
        let sol = solve_family(&fem.stiffness, &fem.lumped_mass, &fem.robin, &b, &sh, cfg).unwrap();
        sol.check().unwrap();
        for (j, s) in sh.iter().enumerate() {
            assert!(rel_err(&sol.x[j], &direct(&fem, &b, *s)) <= 1e-7);
        }
    }

    #[test]
    fn centering_leaves_solutions_unchanged() {
        let (_, fem, b, mut sh) = fixture(8, 5);
        // Exaggerate the Robin term so that centring actually matters.
        for (j, s) in sh.iter_mut().enumerate() {
            s.1 = 0.5 + 0.05 * j as f64;
        }
        let base = SolverConfig { n_arnoldi: 20, parallel: false, ..SolverConfig::default() };
        let on = solve_family(&fem.stiffness, &fem.lumped_mass, &fem.robin, &b, &sh, base.clone()).unwrap();
        let off = solve_family(&fem.stiffness, &fem.lumped_mass, &fem.robin, &b, &sh, SolverConfig { center: false, ..base }).unwrap();
        for j in 0..sh.len() {
            assert!(rel_err(&on.x[j], &off.x[j]) <= 10.0 * 1e-8 * 100.0);
            assert!(rel_err(&on.x[j], &direct(&fem, &b, sh[j])) <= 1e-6);
        }
    }

    #[test]
    fn jacobi_variant_converges() {
        let (_, fem, b, sh) = fixture(8, 4);
        let cfg = SolverConfig { n_arnoldi: 20, preconditioner: Preconditioner::Jacobi, ..SolverConfig::default() };
        let sol = solve_family(&fem.stiffness, &fem.lumped_mass, &fem.robin, &b, &sh, cfg).unwrap();
        sol.check().unwrap();
        for (j, s) in sh.iter().enumerate() {
            assert!(rel_err(&sol.x[j], &direct(&fem, &b, *s)) <= 1e-6);
        }
    }

    #[test]
    fn telemetry_has_one_row_per_system() {
        let (_, fem, b, sh) = fixture(6, 3);
        let sol = solve_family(&fem.stiffness, &fem.lumped_mass, &fem.robin, &b, &sh, SolverConfig { n_arnoldi: 10, k: 4, ..SolverConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_telemetry(&mut buf, &[620.0, 800.0, 980.0], &sh, &sol.stats).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("wavelength_nm,sigma,sigma_prime,iters,matvecs,final_relres"));
    }

    #[test]
    fn rejects_bad_config() {
        let (_, fem, _, sh) = fixture(4, 2);
        let bad = SolverConfig { k: 60, ..SolverConfig::default() };
        assert!(FamilySolver::new(&fem.stiffness, &fem.lumped_mass, &fem.robin, &sh, bad).is_err());
    }
}
