//! Restarted GMRES augmented with a recycled deflation pair.

use nalgebra::{DMatrix, DVector};

use super::arnoldi::{ArnoldiBuilder, GivensLsq};
use super::deflation::{DeflationBasis, ShiftDeflation};

/// Counters and residual history of one solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GmresStats {
    /// Inner Arnoldi steps over all cycles.
    pub iters: usize,
    /// Operator applications, including residual recomputations.
    pub matvecs: usize,
    pub restarts: usize,
    /// Final `‖b − A x‖ / ‖b‖`.
    pub relres: f64,
    pub converged: bool,
    /// Relative residual estimate after every inner step.
    pub history: Vec<f64>,
}

/// Solves `A x = b` from `x0` in `x_{-1} + span{U_j} ⊕ K_{m-k}((I − C_jC_jᵀ)A, r_{-1})`,
/// restarting from the current iterate until `‖b − A x‖ ≤ tol ‖b‖` or
/// `max_restarts` cycles have run.
#[allow(clippy::too_many_arguments)]
pub fn augmented_gmres(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    x0: DVector<f64>,
    basis: &DeflationBasis,
    defl: &ShiftDeflation,
    m: usize,
    tol: f64,
    max_restarts: usize,
) -> (DVector<f64>, GmresStats) {
    let k = defl.dim();
    let inner = m.saturating_sub(k).max(1);
    let bnorm = b.norm();
    let mut stats = GmresStats::default();
    if bnorm == 0.0 {
        stats.converged = true;
        return (DVector::zeros(b.len()), stats);
    }
    let mut x = x0;
    let mut r = b - apply(&x);
    stats.matvecs += 1;
    let deflate = |x: &mut DVector<f64>, r: &mut DVector<f64>| {
        if k > 0 {
            let z = defl.c.tr_mul(r);
            *x += defl.apply_u(basis, &z);
            r.gemv(-1.0, &defl.c, &z, 1.0);
        }
    };
    deflate(&mut x, &mut r);
    let target = tol * bnorm;
    let mut cycle = 0;
    loop {
        let beta = r.norm();
        stats.relres = beta / bnorm;
        if beta <= target {
            stats.converged = true;
            break;
        }
        if cycle >= max_restarts {
            break;
        }
        let c_opt = (k > 0).then_some(&defl.c);
        let (mut builder, _) = ArnoldiBuilder::new(&r, c_opt);
        let mut lsq = GivensLsq::new(beta);
        while builder.steps() < inner && !builder.breakdown {
            let h = builder.step(&apply).to_vec();
            stats.iters += 1;
            stats.matvecs += 1;
            let res = lsq.push(h);
            stats.history.push(res / bnorm);
            if res <= target {
                break;
            }
        }
        let steps = lsq.len();
        let y2 = lsq.solve();
        x.gemv(1.0, &builder.basis_matrix(steps), &y2, 1.0);
        if k > 0 {
            let f = DMatrix::from_columns(&builder.f_cols[..steps]);
            let y1 = -(f * &y2);
            x += defl.apply_u(basis, &y1);
        }
        r = b - apply(&x);
        stats.matvecs += 1;
        deflate(&mut x, &mut r);
        cycle += 1;
    }
    stats.restarts = cycle.saturating_sub(1);
    (x, stats)
}
