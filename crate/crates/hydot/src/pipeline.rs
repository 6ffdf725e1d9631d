//! Pipeline stages shared by the experiments: measurement setup, fields,
//! sensitivity blocks, compression, phantom and the full diffusion forward model.

use nalgebra::DMatrix;
use rayon::prelude::*;

use hydot_core::born::{assemble_h, assemble_h_block, compute_fields, FieldSet, MeasurementSetup};
use hydot_core::grid::{FemMatrices, Grid};
use hydot_core::krylov::SolverConfig;
use hydot_core::lowrank::{build_cluster_tree, recursive_lowrank, ClusterTree, LeafMethod, RecursiveOptions, RecursiveResult};
use hydot_core::optics::{diffusion_coefficient, shifts, ChromophoreTable, OpticalParams};
use hydot_core::pals::{shape, PalsParams, ShapeConfig};
use hydot_core::sparse::{BandCholesky, CsrMatrix};
use hydot_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::{HarnessError, StageExt};

/// Geometry and measurement layout without any solves.
pub struct Layout {
    pub grid: Grid,
    pub fem: FemMatrices,
    pub setup: MeasurementSetup,
    pub params: OpticalParams,
    pub solver: SolverConfig,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig, num_sources: usize) -> std::result::Result<Self, HarnessError> {
        let grid = cfg.grid.build()?;
        let fem = FemMatrices::assemble(&grid);
        let setup = MeasurementSetup::slab_with_pitch(
            &grid,
            &cfg.setup.source_xy(num_sources),
            cfg.setup.detectors_per_source,
            cfg.setup.detector_pitch,
            cfg.wavelengths(),
            ChromophoreTable::bundled(),
        )
        .stage("setup")?;
        Ok(Self { grid, fem, setup, params: cfg.optics.params(), solver: cfg.solver.config()? })
    }

    pub fn with_fields(self) -> std::result::Result<Problem, HarnessError> {
        let fields = compute_fields(&self.grid, &self.fem, &self.setup, &self.params, self.solver.clone()).stage("fields")?;
        let extinction = self.setup.extinction_rows().stage("setup")?;
        let points: Vec<[f64; 2]> = self.setup.sources.iter().map(|s| [s[0], s[1]]).collect();
        let [lx, ly, _] = self.grid.extents;
        let tree = build_cluster_tree(&points, [-lx, -ly], [lx, ly]).stage("setup")?;
        Ok(Problem { layout: self, fields, extinction, tree })
    }
}

/// A layout with its incident/adjoint fields, ready for sensitivity assembly.
pub struct Problem {
    pub layout: Layout,
    pub fields: FieldSet,
    /// Per-measurement extinction rows, `M × N_sp`.
    pub extinction: DMatrix<f64>,
    pub tree: ClusterTree,
}

impl Problem {
    pub fn block(&self, s: usize) -> DMatrix<f64> {
        assemble_h_block(&self.fields, s, &self.layout.fem.lumped_mass)
    }

    pub fn dense_h(&self) -> DMatrix<f64> {
        assemble_h(&self.fields, &self.layout.fem.lumped_mass)
    }

    pub fn compress(&self, eps_d: f64, leaf_method: LeafMethod, cfg: &ExperimentConfig, seed: u64) -> std::result::Result<RecursiveResult, HarnessError> {
        let opts = RecursiveOptions {
            eps_d,
            leaf_method,
            oversample: cfg.compression.oversample,
            probes: cfg.compression.probes,
            seed,
            ..RecursiveOptions::default()
        };
        let provider = |s: usize| -> Result<DMatrix<f64>> { Ok(self.block(s)) };
        recursive_lowrank(&self.tree, &provider, self.layout.setup.block_rows(), self.layout.grid.num_vertices(), &opts).stage("compression")
    }
}

/// Placement of the `n` basis functions of the true anomaly: a ring of radius
/// `0.4 R` around the configured centre, tilted in z, with slightly unequal weights.
pub fn truth_params(cfg: &ExperimentConfig) -> std::result::Result<PalsParams, HarnessError> {
    let r = &cfg.reconstruction;
    let n = r.truth_basis;
    let [cx, cy, cz] = r.anomaly_center;
    // ψ(t) = τ near t ≈ 0.58 for unit weights and τ = 0.1.
    let beta = 0.58 / r.anomaly_radius;
    let ring = if n == 1 { 0.0 } else { 0.4 * r.anomaly_radius };
    let mut alpha = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    for k in 0..n {
        let t = std::f64::consts::TAU * k as f64 / n as f64;
        alpha.push(1.0 - 0.1 * (k % 3) as f64);
        centers.push([cx + ring * t.cos(), cy + ring * t.sin(), cz + 0.25 * ring * (2.0 * t).sin()]);
    }
    PalsParams::new(alpha, vec![beta; n], centers).stage("phantom")
}

/// True shape `μ` on the grid.
pub fn truth_shape(cfg: &ExperimentConfig, grid: &Grid, shape_cfg: &ShapeConfig) -> std::result::Result<(PalsParams, Vec<f64>), HarnessError> {
    let p = truth_params(cfg)?;
    let mu = shape(&p, grid, shape_cfg);
    if mu.iter().all(|&m| m == 0.0) {
        return Err(HarnessError::Config("[reconstruction] the true anomaly covers no grid vertex".into()));
    }
    Ok((p, mu))
}

/// Vertex order with the shortest axis running fastest, which minimises the
/// bandwidth of the finite-element matrices. `order[new] = old`.
fn banded_order(grid: &Grid) -> Vec<usize> {
    let mut axes = [(grid.nx, 0usize), (grid.ny, 1), (grid.nz, 2)];
    axes.sort();
    let dims = [grid.nx, grid.ny, grid.nz];
    let (a, b, c) = (axes[0].1, axes[1].1, axes[2].1);
    let mut order = Vec::with_capacity(grid.num_vertices());
    for k in 0..dims[c] {
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let mut idx = [0usize; 3];
                (idx[a], idx[b], idx[c]) = (i, j, k);
                order.push(grid.index(idx[0], idx[1], idx[2]));
            }
        }
    }
    order
}

fn permute(a: &CsrMatrix, order: &[usize], inverse: &[usize]) -> CsrMatrix {
    let mut t = Vec::with_capacity(a.nnz());
    for (new_i, &old_i) in order.iter().enumerate() {
        for (old_j, v) in a.row(old_i) {
            t.push((new_i, inverse[old_j], v));
        }
    }
    CsrMatrix::from_triplets(a.dim(), t)
}

/// Detector readouts of the unlinearised diffusion model with absorption
/// `μ_a(λ) + μ(r) Σ_l c_l ε_l(λ)`, ordered like the Born measurements.
///
/// Every wavelength is factored once with a banded Cholesky after a
/// bandwidth-reducing renumbering; fluence is `x / D(λ)` and detectors read it
/// by trilinear interpolation. With `μ = 0` this is the incident-field readout.
pub fn full_diffusion_forward(grid: &Grid, fem: &FemMatrices, setup: &MeasurementSetup, params: &OpticalParams, mu: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let n = grid.num_vertices();
    if mu.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: mu.len() });
    }
    if c.len() != setup.table.num_species() {
        return Err(Error::DimensionMismatch { expected: setup.table.num_species(), got: c.len() });
    }
    if let Some(k) = mu.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::InvalidArgument(format!("anomaly value {} at vertex {k} is not a non-negative number", mu[k])));
    }
    if mu.iter().zip(&fem.dirichlet).any(|(&m, &fixed)| m != 0.0 && fixed) {
        return Err(Error::InvalidArgument("anomaly touches the lateral boundary".into()));
    }
    let order = banded_order(grid);
    let mut inverse = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        inverse[old] = new;
    }
    let stiffness = permute(&fem.stiffness, &order, &inverse);
    let robin = permute(&fem.robin, &order, &inverse);
    let sources: Vec<Vec<f64>> = setup
        .sources
        .iter()
        .map(|&p| {
            let mut b = grid.point_source_vector(p)?;
            fem.apply_dirichlet_rhs(&mut b);
            Ok(order.iter().map(|&o| b[o]).collect())
        })
        .collect::<Result<_>>()?;
    let nl = setup.num_wavelengths();
    let per_lambda: Vec<Vec<Vec<f64>>> = setup
        .wavelengths
        .par_iter()
        .map(|&lambda| {
            let d = diffusion_coefficient(lambda, params);
            let (sigma, sigma_p) = shifts(lambda, &setup.table, params)?;
            let extra = params.nu / d * setup.table.absorption(lambda, c)?;
            let diag: Vec<f64> = order.iter().map(|&o| fem.lumped_mass[o] * (sigma + extra * mu[o])).collect();
            let a = CsrMatrix::linear_combination(&[(1.0, &stiffness), (1.0, &CsrMatrix::from_diagonal(&diag)), (sigma_p, &robin)]);
            let chol = BandCholesky::factor(&a)?;
            setup
                .detectors
                .iter()
                .zip(&sources)
                .map(|(dets, b)| {
                    let x = chol.solve(b);
                    let phi: Vec<f64> = inverse.iter().map(|&i| x[i] / d).collect();
                    dets.iter().map(|&r| grid.interpolate(&phi, r)).collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut y = vec![0.0; setup.num_measurements()];
    for (j, per_source) in per_lambda.iter().enumerate() {
        for (s, dets) in per_source.iter().enumerate() {
            for (dd, v) in dets.iter().enumerate() {
                y[setup.row_index(s, dd, j)] = *v;
            }
        }
    }
    debug_assert_eq!(y.len(), setup.num_sources() * setup.detectors_per_source() * nl);
    Ok(y)
}

/// Incident fluence read at every detector, from precomputed fields.
pub fn incident_readout(grid: &Grid, setup: &MeasurementSetup, fields: &FieldSet) -> Result<Vec<f64>> {
    let mut y = vec![0.0; setup.num_measurements()];
    for (s, dets) in setup.detectors.iter().enumerate() {
        for (d, &r) in dets.iter().enumerate() {
            for j in 0..setup.num_wavelengths() {
                y[setup.row_index(s, d, j)] = grid.interpolate(&fields.incident[s][j], r)?;
            }
        }
    }
    Ok(y)
}

/// Scattered data of the full model: total minus incident readout, both from
/// the same direct solver so that discretisation of the source cancels.
pub fn full_scattered(grid: &Grid, fem: &FemMatrices, setup: &MeasurementSetup, params: &OpticalParams, mu: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let total = full_diffusion_forward(grid, fem, setup, params, mu, c)?;
    let incident = full_diffusion_forward(grid, fem, setup, params, &vec![0.0; mu.len()], c)?;
    Ok(total.iter().zip(&incident).map(|(a, b)| a - b).collect())
}
