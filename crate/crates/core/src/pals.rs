//! Parametric level-set shapes and the alternating shape/concentration inversion.
//!
//! The anomaly is the `τ`-level set of `φ(r) = Σ_k α_k ψ(β_k ‖r − χ_k‖*)`, with
//! `ψ` the Wendland C2 function and `‖r‖* = √(‖r‖² + ν²)`. Concentrations come
//! from a linear least-squares solve; shape parameters from damped Gauss–Newton
//! (Levenberg–Marquardt) steps.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Grid;
use crate::linalg::{lstsq_min_norm, solve_upper, spectral_norm, thin_qr};
use crate::lowrank::LinearOperator;
use crate::{Error, Result};

/// Wendland C2 function `(1 − t)⁴₊ (4t + 1)`.
pub fn wendland(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        let s = 1.0 - t;
        s * s * s * s * (4.0 * t + 1.0)
    }
}

/// `ψ'(t) = −20 t (1 − t)³₊`.
pub fn wendland_deriv(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        let s = 1.0 - t;
        -20.0 * t * s * s * s
    }
}

/// Smoothed Heaviside with a sinusoidal ramp of half-width `eps`.
pub fn heaviside(t: f64, eps: f64) -> f64 {
    if t < -eps {
        0.0
    } else if t > eps {
        1.0
    } else {
        0.5 * (1.0 + t / eps + (std::f64::consts::PI * t / eps).sin() / std::f64::consts::PI)
    }
}

/// Derivative of [`heaviside`].
pub fn dirac(t: f64, eps: f64) -> f64 {
    if t.abs() > eps {
        0.0
    } else {
        (1.0 + (std::f64::consts::PI * t / eps).cos()) / (2.0 * eps)
    }
}

/// Level, smoothing and norm-regularisation constants of the shape model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeConfig {
    pub tau: f64,
    pub eps_h: f64,
    pub nu_norm: f64,
}

impl ShapeConfig {
    /// Defaults with `ν = 10⁻³ ×` the smallest grid spacing.
    pub fn for_grid(grid: &Grid) -> Self {
        Self { tau: 0.1, eps_h: 0.05, nu_norm: 1e-3 * grid.min_spacing() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_h > 0.0 && self.nu_norm > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument("shape config needs ε_H > 0, ν > 0 and finite τ".into()));
        }
        Ok(())
    }
}

/// Shape parameters `p = [α, β, χ_x, χ_y, χ_z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PalsParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
}

impl PalsParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, centers: Vec<[f64; 3]>) -> Result<Self> {
        let p = Self { alpha, beta, centers };
        p.validate()?;
        Ok(p)
    }

    pub fn num_basis(&self) -> usize {
        self.alpha.len()
    }

    /// Length of the flattened vector, `5 n_p`.
    pub fn len(&self) -> usize {
        5 * self.num_basis()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alpha.len();
        if self.beta.len() != n || self.centers.len() != n {
            return Err(Error::InvalidArgument("α, β and χ must have the same count".into()));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0)) {
            return Err(Error::InvalidArgument(format!("RBF width β = {b} must be positive")));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(&self.alpha);
        v.extend(&self.beta);
        for d in 0..3 {
            v.extend(self.centers.iter().map(|c| c[d]));
        }
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.is_empty() || v.len() % 5 != 0 {
            return Err(Error::InvalidArgument(format!("parameter vector length {} is not a positive multiple of 5", v.len())));
        }
        let n = v.len() / 5;
        let centers = (0..n).map(|k| [v[2 * n + k], v[3 * n + k], v[4 * n + k]]).collect();
        Self::new(v[..n].to_vec(), v[n..2 * n].to_vec(), centers)
    }

    /// Random start: centers jittered on a coarse lattice in the slab's middle
    /// third, weights `alpha`, widths `beta`.
    pub fn initial(grid: &Grid, n_p: usize, alpha: f64, beta: f64, seed: u64) -> Result<Self> {
        if n_p == 0 {
            return Err(Error::InvalidArgument("need at least one basis function".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lx, ly, lz] = grid.extents;
        let side = (n_p as f64).sqrt().ceil() as usize;
        let centers = (0..n_p)
            .map(|k| {
                let (i, j) = (k % side, k / side);
                let mut cell = |idx: usize, l: f64| -l / 3.0 + (2.0 * l / 3.0) * (idx as f64 + rng.random::<f64>()) / side as f64;
                let x = cell(i, lx);
                let y = cell(j, ly);
                [x, y, lz * (0.35 + 0.3 * rng.random::<f64>())]
            })
            .collect();
        Self::new(vec![alpha; n_p], vec![beta; n_p], centers)
    }
}

fn smoothed_norm(d: [f64; 3], nu: f64) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + nu * nu).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// `φ` at every grid vertex.
pub fn level_set(p: &PalsParams, grid: &Grid, cfg: &ShapeConfig) -> Vec<f64> {
    (0..grid.num_vertices())
        .map(|n| {
            let r = grid.position(n);
            (0..p.num_basis()).map(|k| p.alpha[k] * wendland(p.beta[k] * smoothed_norm(sub(r, p.centers[k]), cfg.nu_norm))).sum()
        })
        .collect()
}

/// `μ = H_ε(φ − τ)` at every vertex.
pub fn shape(p: &PalsParams, grid: &Grid, cfg: &ShapeConfig) -> Vec<f64> {
    level_set(p, grid, cfg).into_iter().map(|phi| heaviside(phi - cfg.tau, cfg.eps_h)).collect()
}

/// `∂μ/∂p` (vertices × `5 n_p`), columns ordered as in [`PalsParams::to_vec`].
pub fn shape_jacobian(p: &PalsParams, grid: &Grid, cfg: &ShapeConfig) -> DMatrix<f64> {
    let np = p.num_basis();
    let phi = level_set(p, grid, cfg);
    let mut jac = DMatrix::zeros(grid.num_vertices(), 5 * np);
    for (n, &ph) in phi.iter().enumerate() {
        let dd = dirac(ph - cfg.tau, cfg.eps_h);
        if dd == 0.0 {
            continue;
        }
        let r = grid.position(n);
        for k in 0..np {
            let d = sub(r, p.centers[k]);
            let norm = smoothed_norm(d, cfg.nu_norm);
            let t = p.beta[k] * norm;
            jac[(n, k)] = dd * wendland(t);
            let dpsi = wendland_deriv(t);
            if dpsi == 0.0 {
                continue;
            }
            jac[(n, np + k)] = dd * p.alpha[k] * dpsi * norm;
            let g = -dd * p.alpha[k] * p.beta[k] * dpsi / norm;
            for (a, dc) in d.iter().enumerate() {
                jac[(n, (2 + a) * np + k)] = g * dc;
            }
        }
    }
    jac
}

/// Data and operator of one inversion. The residual is `ε = W(y − D(p)c)` with
/// `D(p) = diag(Ĥμ) E` and `E` the per-measurement extinction rows.
pub struct InverseProblem<'a> {
    pub op: &'a dyn LinearOperator,
    pub extinction: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub weight: f64,
    pub grid: &'a Grid,
    pub shape: ShapeConfig,
}

impl InverseProblem<'_> {
    fn check(&self) -> Result<()> {
        let m = self.op.nrows();
        if self.y.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: self.y.len() });
        }
        if self.extinction.nrows() != m {
            return Err(Error::DimensionMismatch { expected: m, got: self.extinction.nrows() });
        }
        if self.op.ncols() != self.grid.num_vertices() {
            return Err(Error::DimensionMismatch { expected: self.grid.num_vertices(), got: self.op.ncols() });
        }
        if !(self.weight > 0.0) {
            return Err(Error::InvalidArgument("data weight must be positive".into()));
        }
        self.shape.validate()
    }

    /// `ε` for a given `Ĥμ` and `c`.
    pub fn residual(&self, hmu: &[f64], c: &[f64]) -> Vec<f64> {
        let ec = self.extinction * DVector::from_column_slice(c);
        self.y.iter().zip(hmu).zip(ec.iter()).map(|((y, h), e)| self.weight * (y - h * e)).collect()
    }

    /// `W D(p) = W diag(Ĥμ) E`, the `M × N_sp` concentration matrix.
    pub fn concentration_matrix(&self, hmu: &[f64]) -> DMatrix<f64> {
        let mut d = self.extinction.clone();
        for (mut row, h) in d.row_iter_mut().zip(hmu) {
            row *= self.weight * h;
        }
        d
    }

    /// `J = −W diag(Ec) Ĥ ∂μ/∂p`.
    pub fn jacobian(&self, c: &[f64], dmu: &DMatrix<f64>) -> DMatrix<f64> {
        let ec = self.extinction * DVector::from_column_slice(c);
        let mut j = self.op.matmat(dmu);
        for (mut row, e) in j.row_iter_mut().zip(ec.iter()) {
            row *= -self.weight * e;
        }
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationFit {
    pub c: Vec<f64>,
    pub rank: usize,
    /// `WD(p)` was rank deficient; `c` is the minimum-norm solution.
    pub degenerate: bool,
}

/// `c = (W D(p))⁺ W y` through the SVD of the `M × N_sp` matrix `WD(p)`.
pub fn solve_concentrations(hmu: &[f64], extinction: &DMatrix<f64>, weight: f64, y: &[f64]) -> Result<ConcentrationFit> {
    let m = extinction.nrows();
    if hmu.len() != m || y.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: hmu.len().min(y.len()) });
    }
    let mut d = extinction.clone();
    for (mut row, h) in d.row_iter_mut().zip(hmu) {
        row *= weight * h;
    }
    let rhs = DVector::from_iterator(m, y.iter().map(|v| v * weight));
    if d.amax() == 0.0 {
        return Ok(ConcentrationFit { c: vec![0.0; extinction.ncols()], rank: 0, degenerate: true });
    }
    let (c, rank) = lstsq_min_norm(&d, &rhs, 1e-12);
    Ok(ConcentrationFit { c: c.data.into(), rank, degenerate: rank < extinction.ncols() })
}

/// Solves `(JᵀJ + νI) δp = −Jᵀε` as the least-squares problem
/// `min ‖[J; √ν I] δp + [ε; 0]‖` by a thin QR of the stacked matrix.
/// `ν = 0` gives the Gauss–Newton step (minimum-norm if `J` is rank deficient).
pub fn lm_step(j: &DMatrix<f64>, eps: &[f64], nu: f64) -> Result<DVector<f64>> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::InvalidArgument(format!("damping ν = {nu} must be finite and non-negative")));
    }
    let (m, np) = j.shape();
    if eps.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: eps.len() });
    }
    let mut a = DMatrix::zeros(m + np, np);
    a.rows_mut(0, m).copy_from(j);
    for k in 0..np {
        a[(m + k, k)] = nu.sqrt();
    }
    let mut rhs = DVector::zeros(m + np);
    for (i, e) in eps.iter().enumerate() {
        rhs[i] = -e;
    }
    let (q, r) = thin_qr(&a);
    let diag_max = (0..np).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    let diag_min = (0..np).map(|k| r[(k, k)].abs()).fold(f64::INFINITY, f64::min);
    if diag_max > 0.0 && diag_min > 1e-12 * diag_max {
        Ok(solve_upper(&r, &q.tr_mul(&rhs)))
    } else {
        Ok(lstsq_min_norm(&a, &rhs, 1e-12).0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_retries: usize,
    /// Initial damping relative to the largest diagonal entry of `JᵀJ`.
    pub nu_init: f64,
    /// Discrepancy factor `γ > 1`.
    pub gamma: f64,
    pub stagnation_tol: f64,
    pub stagnation_window: usize,
    /// Fixed concentrations; when set only the shape is optimised.
    pub known_c: Option<Vec<f64>>,
    /// Re-solve `c` for every LM trial and project the concentration
    /// directions out of the shape Jacobian (variable projection).
    pub variable_projection: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { max_outer: 40, max_inner: 4, max_retries: 8, nu_init: 1e-2, gamma: 1.2, stagnation_tol: 1e-6, stagnation_window: 3, known_c: None, variable_projection: false }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) {
            return Err(Error::InvalidArgument(format!("discrepancy factor γ = {} must exceed 1", self.gamma)));
        }
        if self.max_outer == 0 || self.max_inner == 0 || !(self.nu_init > 0.0) {
            return Err(Error::InvalidArgument("iteration limits and ν₀ must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the optimisation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub outer: usize,
    /// 0 for the concentration update, then LM attempts.
    pub inner: usize,
    pub resnorm: f64,
    pub nu: f64,
    pub accepted: bool,
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Discrepancy,
    MaxOuter,
    Stagnation,
    NoDescent,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub p: PalsParams,
    pub c: Vec<f64>,
    pub mu: Vec<f64>,
    pub resnorm: f64,
    pub stop: StopReason,
    pub degenerate: bool,
    pub trace: Vec<TraceRow>,
}

impl Reconstruction {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Discrepancy
    }
}

/// `J ← (I − QQᵀ) J` with `Q` an orthonormal basis of `range(a)`.
fn project_out(j: &mut DMatrix<f64>, a: &DMatrix<f64>) {
    if a.amax() == 0.0 {
        return;
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > 1e-12 * smax).collect();
    let q = u.select_columns(&keep);
    let qtj = q.tr_mul(j);
    *j -= q * qtj;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Alternates concentration solves with LM shape updates until
/// `‖ε‖ ≤ γ W‖η‖` (with `W‖η‖` passed as `noise_norm`), the outer limit, or
/// stagnation. A trial step is accepted only if it lowers `‖ε‖`; acceptance
/// divides `ν` by 10, rejection multiplies it by 10.
pub fn reconstruct(problem: &InverseProblem, init: PalsParams, noise_norm: f64, cfg: &ReconConfig, truth: Option<&[f64]>) -> Result<Reconstruction> {
    problem.check()?;
    cfg.validate()?;
    init.validate()?;
    if let Some(k) = &cfg.known_c {
        if k.len() != problem.extinction.ncols() {
            return Err(Error::DimensionMismatch { expected: problem.extinction.ncols(), got: k.len() });
        }
    }
    let grid = problem.grid;
    let dice_of = |mu: &[f64]| truth.map(|t| shape_metrics(t, mu, 0.5).dice);
    let scale = problem.weight * norm(problem.y);
    let target = (cfg.gamma * noise_norm).max(1e-12 * scale);

    let mut p = init;
    let mut mu = shape(&p, grid, &problem.shape);
    let mut hmu = problem.op.matvec(&mu);
    let mut c = vec![0.0; problem.extinction.ncols()];
    let mut nu: Option<f64> = None;
    let mut trace = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut degenerate = false;
    let mut resnorm = f64::INFINITY;
    let mut stop = StopReason::MaxOuter;
    let varpro = cfg.variable_projection && cfg.known_c.is_none();

    'outer: for outer in 0..cfg.max_outer {
        let fit = match &cfg.known_c {
            Some(k) => ConcentrationFit { c: k.clone(), rank: k.len(), degenerate: false },
            None => solve_concentrations(&hmu, problem.extinction, problem.weight, problem.y)?,
        };
        degenerate = fit.degenerate;
        c = fit.c;
        let mut eps = problem.residual(&hmu, &c);
        resnorm = norm(&eps);
        trace.push(TraceRow { outer, inner: 0, resnorm, nu: nu.unwrap_or(0.0), accepted: true, dice: dice_of(&mu) });
        if resnorm <= target {
            stop = StopReason::Discrepancy;
            break;
        }
        history.push(resnorm);
        if history.len() > cfg.stagnation_window {
            let w = &history[history.len() - cfg.stagnation_window - 1..];
            if w.windows(2).all(|x| (x[0] - x[1]).abs() <= cfg.stagnation_tol * x[0]) {
                stop = StopReason::Stagnation;
                break;
            }
        }
        if fit.rank == 0 {
            stop = StopReason::NoDescent;
            break;
        }
        let mut attempt = 0;
        for _ in 0..cfg.max_inner {
            let dmu = shape_jacobian(&p, grid, &problem.shape);
            let mut jac = problem.jacobian(&c, &dmu);
            if varpro {
                project_out(&mut jac, &problem.concentration_matrix(&hmu));
            }
            let nu_now = *nu.get_or_insert_with(|| {
                let dmax = jac.column_iter().map(|col| col.norm_squared()).fold(0.0, f64::max);
                (cfg.nu_init * dmax).max(f64::MIN_POSITIVE)
            });
            let mut nu_try = nu_now;
            let mut accepted = false;
            for _ in 0..=cfg.max_retries {
                attempt += 1;
                let dp = lm_step(&jac, &eps, nu_try)?;
                let trial: Vec<f64> = p.to_vec().iter().zip(dp.iter()).map(|(a, b)| a + b).collect();
                let candidate = PalsParams::from_vec(&trial).ok();
                let evaluated = candidate.map(|q| {
                    let m = shape(&q, grid, &problem.shape);
                    let h = problem.op.matvec(&m);
                    let cq = if varpro { solve_concentrations(&h, problem.extinction, problem.weight, problem.y).map(|f| f.c).unwrap_or_else(|_| c.clone()) } else { c.clone() };
                    let e = problem.residual(&h, &cq);
                    (q, m, h, e, cq)
                });
                match evaluated {
                    Some((q, m, h, e, cq)) if norm(&e) < resnorm => {
                        resnorm = norm(&e);
                        trace.push(TraceRow { outer, inner: attempt, resnorm, nu: nu_try, accepted: true, dice: dice_of(&m) });
                        (p, mu, hmu, eps, c) = (q, m, h, e, cq);
                        nu_try /= 10.0;
                        accepted = true;
                        break;
                    }
                    other => {
                        let r = other.map(|t| norm(&t.3)).unwrap_or(f64::INFINITY);
                        trace.push(TraceRow { outer, inner: attempt, resnorm: r, nu: nu_try, accepted: false, dice: None });
                        nu_try *= 10.0;
                    }
                }
            }
            nu = Some(nu_try);
            if !accepted {
                if attempt == cfg.max_retries + 1 {
                    stop = StopReason::NoDescent;
                    break 'outer;
                }
                break;
            }
            if resnorm <= target {
                break;
            }
        }
    }
    Ok(Reconstruction { p, c, mu, resnorm, stop, degenerate, trace })
}

/// Writes the trace as CSV.
pub fn write_trace(out: &mut impl Write, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "outer_iter,inner_iter,resnorm,nu,accepted,dice_vs_truth")?;
    for r in trace {
        let dice = r.dice.map(|d| format!("{d:.6}")).unwrap_or_default();
        writeln!(out, "{},{},{:.12e},{:.6e},{},{}", r.outer, r.inner, r.resnorm, r.nu, u8::from(r.accepted), dice)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMetrics {
    pub l2_rel: f64,
    pub dice: f64,
    /// Both binarised shapes were empty; Dice is reported as 1.
    pub both_empty: bool,
}

/// Relative L2 error and Dice overlap after binarising at `threshold`.
pub fn shape_metrics(truth: &[f64], estimate: &[f64], threshold: f64) -> ShapeMetrics {
    assert_eq!(truth.len(), estimate.len(), "shape vectors must have equal length");
    let diff = truth.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let tn = norm(truth);
    let l2_rel = if tn > 0.0 { diff / tn } else { diff };
    let (mut inter, mut nt, mut ne) = (0usize, 0usize, 0usize);
    for (a, b) in truth.iter().zip(estimate) {
        let (ia, ib) = (*a >= threshold, *b >= threshold);
        nt += usize::from(ia);
        ne += usize::from(ib);
        inter += usize::from(ia && ib);
    }
    if nt + ne == 0 {
        return ShapeMetrics { l2_rel, dice: 1.0, both_empty: true };
    }
    ShapeMetrics { l2_rel, dice: 2.0 * inter as f64 / (nt + ne) as f64, both_empty: false }
}

/// Measured gaps between exact and compressed-operator quantities and the
/// corresponding bounds, all in the rescaled variables `y ← Wy`, `H ← W Ē H`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    /// `‖H − Ĥ‖₂ / ‖H‖₂` after rescaling.
    pub eps_bar: f64,
    pub f_gap: f64,
    pub f_bound: f64,
    pub grad_gap: f64,
    pub grad_bound: f64,
    pub tau_g: f64,
    pub cos_theta: f64,
    pub cos_bound: f64,
    pub dp_gap: f64,
    pub dp_bound: f64,
}

impl PerturbationReport {
    pub fn holds(&self) -> bool {
        let slack = |gap: f64, bound: f64| gap <= bound * (1.0 + 1e-10) + 1e-14;
        slack(self.f_gap, self.f_bound)
            && slack(self.grad_gap, self.grad_bound)
            && self.tau_g < 1.0
            && self.cos_theta >= self.cos_bound - 1e-12
            && slack(self.dp_gap, self.dp_bound)
    }
}

/// Compares objective, gradient and LM direction computed with the exact `H`
/// against the compressed `Ĥ` at shape `μ` with Jacobian `∂μ/∂p`.
///
/// The objective bound carries its second-order term explicitly,
/// `2ε̄‖y − Ĥμ‖‖H‖‖μ‖ + ε̄²‖H‖²‖μ‖²`; the direction bound uses the singular
/// values of the exact Jacobian for `η(ν)` and `σ_min`.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_bounds(
    h: &DMatrix<f64>,
    h_hat: &dyn LinearOperator,
    extinction: &DMatrix<f64>,
    c: &[f64],
    weight: f64,
    y: &[f64],
    mu: &[f64],
    dmu: &DMatrix<f64>,
    nu: f64,
) -> Result<PerturbationReport> {
    let (m, n) = h.shape();
    if h_hat.nrows() != m || h_hat.ncols() != n || y.len() != m || mu.len() != n || dmu.nrows() != n {
        return Err(Error::DimensionMismatch { expected: m, got: h_hat.nrows() });
    }
    let ec = extinction * DVector::from_column_slice(c);
    let scale_rows = |mut a: DMatrix<f64>| {
        for (mut row, e) in a.row_iter_mut().zip(ec.iter()) {
            row *= weight * e;
        }
        a
    };
    let hs = scale_rows(h.clone());
    let hhs = scale_rows(h_hat.matmat(&DMatrix::identity(n, n)));
    let ys = DVector::from_iterator(m, y.iter().map(|v| v * weight));
    let muv = DVector::from_column_slice(mu);

    let h_norm = spectral_norm(&hs);
    let e_norm = spectral_norm(&(&hs - &hhs));
    let eps_bar = if h_norm > 0.0 { e_norm / h_norm } else { 0.0 };
    let mu_norm = muv.norm();
    let r = &ys - &hs * &muv;
    let r_hat = &ys - &hhs * &muv;
    let f_gap = (r.norm_squared() - r_hat.norm_squared()).abs();
    let f_bound = 2.0 * eps_bar * r_hat.norm() * h_norm * mu_norm + (eps_bar * h_norm * mu_norm).powi(2);

    let grad = -(dmu.transpose() * (hs.transpose() * &r));
    let grad_hat = -(dmu.transpose() * (hhs.transpose() * &r_hat));
    let grad_gap = (&grad - &grad_hat).norm();
    let grad_bound = eps_bar * spectral_norm(dmu) * h_norm * (mu_norm * h_norm + r_hat.norm());
    let gh = grad_hat.norm();
    let tau_g = if gh > 0.0 { grad_gap / gh } else { f64::INFINITY };
    let cos_theta = if grad.norm() > 0.0 && gh > 0.0 { grad.dot(&grad_hat) / (grad.norm() * gh) } else { 1.0 };
    let cos_bound = (1.0 - tau_g * tau_g) / (1.0 + tau_g * tau_g).sqrt();

    let jac = -(&hs * dmu);
    let jac_hat = -(&hhs * dmu);
    let eps: Vec<f64> = r_hat.iter().copied().collect();
    let dp = lm_step(&jac, &eps, nu)?;
    let dp_hat = lm_step(&jac_hat, &eps, nu)?;
    let dp_gap = (&dp - &dp_hat).norm();
    let sv = crate::linalg::singular_values(&jac);
    let (s_max, s_min) = (sv.first().copied().unwrap_or(0.0), sv.last().copied().unwrap_or(0.0));
    let eta = if nu > 0.0 && nu.sqrt() >= s_min && nu.sqrt() <= s_max {
        1.0 / (2.0 * nu.sqrt())
    } else {
        let g = |s: f64| if s > 0.0 { s / (nu + s * s) } else { 0.0 };
        g(s_min).max(g(s_max))
    };
    let e_j = spectral_norm(&(&jac - &jac_hat));
    let dp_bound = (eta * dp_hat.norm() + r_hat.norm() / (nu + s_min * s_min)) * e_j;
    Ok(PerturbationReport { eps_bar, f_gap, f_bound, grad_gap, grad_bound, tau_g, cos_theta, cos_bound, dp_gap, dp_bound })
}
