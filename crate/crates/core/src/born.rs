//! Incident/adjoint fields, Born sensitivity blocks and the measurement model.
//!
//! Measurements are ordered source-major, detector-middle, wavelength-minor:
//! row `(s·N_ds + d)·N_λ + j`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::grid::{FemMatrices, Grid};
use crate::krylov::{FamilySolver, SolverConfig, SystemStats};
use crate::lowrank::LinearOperator;
use crate::optics::{diffusion_coefficient, shifts, ChromophoreTable, OpticalParams};
use crate::{Error, Result};

/// Spacing of the square detector pattern under each source (cm).
pub const DETECTOR_PITCH: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct MeasurementSetup {
    /// Source positions on the `z = Lz` plane.
    pub sources: Vec<[f64; 3]>,
    /// `detectors[s]` are the detectors paired with source `s` on `z = 0`.
    pub detectors: Vec<Vec<[f64; 3]>>,
    pub wavelengths: Vec<f64>,
    pub table: ChromophoreTable,
}

impl MeasurementSetup {
    /// Sources at `(x, y, Lz)` with an `n × n` detector square (`n² = n_ds`) centred
    /// under each source at `z = 0`, spaced [`DETECTOR_PITCH`] apart.
    pub fn slab(grid: &Grid, source_xy: &[(f64, f64)], n_ds: usize, wavelengths: Vec<f64>, table: ChromophoreTable) -> Result<Self> {
        Self::slab_with_pitch(grid, source_xy, n_ds, DETECTOR_PITCH, wavelengths, table)
    }

    /// [`MeasurementSetup::slab`] with a custom detector spacing.
    pub fn slab_with_pitch(grid: &Grid, source_xy: &[(f64, f64)], n_ds: usize, pitch: f64, wavelengths: Vec<f64>, table: ChromophoreTable) -> Result<Self> {
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::InvalidArgument(format!("detector pitch {pitch} must be positive")));
        }
        let side = (n_ds as f64).sqrt().round() as usize;
        if side * side != n_ds || n_ds == 0 {
            return Err(Error::InvalidArgument(format!("detectors per source must be a perfect square, got {n_ds}")));
        }
        if wavelengths.is_empty() {
            return Err(Error::InvalidArgument("no wavelengths".into()));
        }
        let lz = grid.extents[2];
        let half = (side as f64 - 1.0) / 2.0;
        let mut sources = Vec::new();
        let mut detectors = Vec::new();
        for &(x, y) in source_xy {
            let src = [x, y, lz];
            grid.interpolation_weights(src)?;
            let mut dets = Vec::with_capacity(n_ds);
            for iy in 0..side {
                for ix in 0..side {
                    let p = [
                        x + (ix as f64 - half) * pitch,
                        y + (iy as f64 - half) * pitch,
                        0.0,
                    ];
                    grid.interpolation_weights(p)?;
                    dets.push(p);
                }
            }
            sources.push(src);
            detectors.push(dets);
        }
        for &l in &wavelengths {
            table.extinction_at(l)?;
        }
        Ok(Self { sources, detectors, wavelengths, table })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn detectors_per_source(&self) -> usize {
        self.detectors.first().map_or(0, Vec::len)
    }

    pub fn num_wavelengths(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn block_rows(&self) -> usize {
        self.detectors_per_source() * self.num_wavelengths()
    }

    pub fn num_measurements(&self) -> usize {
        self.num_sources() * self.block_rows()
    }

    pub fn row_index(&self, s: usize, d: usize, j: usize) -> usize {
        (s * self.detectors_per_source() + d) * self.num_wavelengths() + j
    }

    /// `M × N_sp` matrix whose row `m` holds `ε_l(λ)` for the wavelength of measurement `m`.
    pub fn extinction_rows(&self) -> Result<DMatrix<f64>> {
        let e = self.table.extinction_matrix(&self.wavelengths)?;
        let nsp = self.table.num_species();
        let nl = self.num_wavelengths();
        Ok(DMatrix::from_fn(self.num_measurements(), nsp, |m, l| e[m % nl][l]))
    }
}

/// Solved fields for every source, detector and wavelength.
#[derive(Debug, Clone)]
pub struct FieldSet {
    /// `incident[s][j]`
    pub incident: Vec<Vec<Vec<f64>>>,
    /// `adjoint[s][d][j]`
    pub adjoint: Vec<Vec<Vec<Vec<f64>>>>,
    /// `D(λ_j)`; every field was solved with right-hand side `b / D`.
    pub diffusion: Vec<f64>,
    /// `ν`, needed by the sensitivity kernel.
    pub nu: f64,
    /// Solver statistics of every right-hand side, sources first.
    pub solves: Vec<(String, Vec<SystemStats>)>,
}

impl FieldSet {
    pub fn total_iterations(&self) -> usize {
        self.solves.iter().flat_map(|(_, s)| s.iter().map(|x| x.iters)).sum()
    }
}

/// Builds the shifts of every wavelength and a reusable solver for them.
pub fn family_solver(fem: &FemMatrices, setup: &MeasurementSetup, params: &OpticalParams, config: SolverConfig) -> Result<(FamilySolver, Vec<(f64, f64)>)> {
    params.validate()?;
    let sh = setup
        .wavelengths
        .iter()
        .map(|&l| shifts(l, &setup.table, params))
        .collect::<Result<Vec<_>>>()?;
    Ok((FamilySolver::new(&fem.stiffness, &fem.lumped_mass, &fem.robin, &sh, config)?, sh))
}

/// Solves `(K + σ_j M + σ'_j R) φ = b / D(λ_j)` for one point source at every wavelength.
fn solve_point(grid: &Grid, fem: &FemMatrices, solver: &FamilySolver, diffusion: &[f64], pos: [f64; 3], what: String) -> Result<(Vec<Vec<f64>>, Vec<SystemStats>)> {
    let mut b = grid.point_source_vector(pos)?;
    fem.apply_dirichlet_rhs(&mut b);
    let sol = solver.solve(&b)?;
    sol.check().map_err(|e| {
        let index = match &e {
            Error::NotConverged { index, .. } => *index,
            _ => 0,
        };
        Error::FieldSolve { what: what.clone(), index, source: Box::new(e) }
    })?;
    let fields = sol
        .x
        .into_iter()
        .zip(diffusion)
        .map(|(x, d)| x.into_iter().map(|v| v / d).collect())
        .collect();
    Ok((fields, sol.stats))
}

/// Incident fields for every source and adjoint fields for every detector.
pub fn compute_fields(grid: &Grid, fem: &FemMatrices, setup: &MeasurementSetup, params: &OpticalParams, config: SolverConfig) -> Result<FieldSet> {
    let (solver, _) = family_solver(fem, setup, params, config)?;
    let diffusion: Vec<f64> = setup.wavelengths.iter().map(|&l| diffusion_coefficient(l, params)).collect();
    let mut jobs: Vec<(usize, Option<usize>, [f64; 3])> = Vec::new();
    for (s, src) in setup.sources.iter().enumerate() {
        jobs.push((s, None, *src));
    }
    for (s, dets) in setup.detectors.iter().enumerate() {
        for (d, det) in dets.iter().enumerate() {
            jobs.push((s, Some(d), *det));
        }
    }
    let results: Vec<(Vec<Vec<f64>>, Vec<SystemStats>)> = jobs
        .par_iter()
        .map(|&(s, d, pos)| {
            let what = match d {
                None => format!("source {s}"),
                Some(d) => format!("detector {d} of source {s}"),
            };
            solve_point(grid, fem, &solver, &diffusion, pos, what)
        })
        .collect::<Result<_>>()?;
    let mut incident = vec![Vec::new(); setup.num_sources()];
    let mut adjoint: Vec<Vec<Vec<Vec<f64>>>> = setup.detectors.iter().map(|d| vec![Vec::new(); d.len()]).collect();
    let mut solves = Vec::with_capacity(jobs.len());
    for ((s, d, _), (fields, stats)) in jobs.into_iter().zip(results) {
        match d {
            None => {
                incident[s] = fields;
                solves.push((format!("source {s}"), stats));
            }
            Some(d) => {
                adjoint[s][d] = fields;
                solves.push((format!("detector {s}.{d}"), stats));
            }
        }
    }
    Ok(FieldSet { incident, adjoint, diffusion, nu: params.nu, solves })
}

/// Sensitivity rows of source `s`: entry `((d, j), n) = −ν φ_d,n φ_i,n w_n`.
pub fn assemble_h_block(fields: &FieldSet, s: usize, weights: &[f64]) -> DMatrix<f64> {
    let nd = fields.adjoint[s].len();
    let nl = fields.incident[s].len();
    let n = weights.len();
    let mut h = DMatrix::zeros(nd * nl, n);
    for d in 0..nd {
        for j in 0..nl {
            let (pi, pd) = (&fields.incident[s][j], &fields.adjoint[s][d][j]);
            let row = d * nl + j;
            for c in 0..n {
                h[(row, c)] = -fields.nu * pd[c] * pi[c] * weights[c];
            }
        }
    }
    h
}

/// All source blocks stacked in measurement order.
pub fn assemble_h(fields: &FieldSet, weights: &[f64]) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = (0..fields.incident.len()).map(|s| assemble_h_block(fields, s, weights)).collect();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut h = DMatrix::zeros(rows, weights.len());
    let mut r0 = 0;
    for b in blocks {
        h.view_mut((r0, 0), b.shape()).copy_from(&b);
        r0 += b.nrows();
    }
    h
}

/// `y = Σ_l c_l E_l H μ`, with `E_l` the per-measurement extinction of species `l`.
pub fn forward_measure(op: &dyn LinearOperator, extinction_rows: &DMatrix<f64>, c: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    if c.len() != extinction_rows.ncols() {
        return Err(Error::DimensionMismatch { expected: extinction_rows.ncols(), got: c.len() });
    }
    if mu.len() != op.ncols() {
        return Err(Error::DimensionMismatch { expected: op.ncols(), got: mu.len() });
    }
    if extinction_rows.nrows() != op.nrows() {
        return Err(Error::DimensionMismatch { expected: op.nrows(), got: extinction_rows.nrows() });
    }
    let hmu = op.matvec(mu);
    let scale = extinction_rows * DVector::from_column_slice(c);
    Ok(hmu.iter().zip(scale.iter()).map(|(a, b)| a * b).collect())
}

/// Noisy data, the noise realisation and the scalar weight `W = 1/σ_m`.
#[derive(Debug, Clone)]
pub struct NoisyData {
    pub y: Vec<f64>,
    pub eta: Vec<f64>,
    pub weight: f64,
}

/// Adds white Gaussian noise rescaled so that `20 log₁₀(‖y‖/‖η‖) = snr_db` exactly.
/// `None` means noise-free; the weight is then `√M / ‖y‖`.
pub fn add_noise(y: &[f64], snr_db: Option<f64>, seed: u64) -> Result<NoisyData> {
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ynorm == 0.0 {
        return Err(Error::InvalidArgument("cannot add relative noise to zero data".into()));
    }
    let m = y.len() as f64;
    let Some(snr) = snr_db.filter(|s| s.is_finite()) else {
        return Ok(NoisyData { y: y.to_vec(), eta: vec![0.0; y.len()], weight: m.sqrt() / ynorm });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..y.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let rnorm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = ynorm / 10f64.powf(snr / 20.0);
    let eta: Vec<f64> = raw.iter().map(|v| v * target / rnorm).collect();
    let sigma_m = target / m.sqrt();
    Ok(NoisyData { y: y.iter().zip(&eta).map(|(a, b)| a + b).collect(), eta, weight: 1.0 / sigma_m })
}

/// Writes a dense block: little-endian `u64` rows and cols, then row-major `f64`.
pub fn write_block(path: &Path, h: &DMatrix<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(h.nrows() as u64).to_le_bytes())?;
    w.write_all(&(h.ncols() as u64).to_le_bytes())?;
    for i in 0..h.nrows() {
        for j in 0..h.ncols() {
            w.write_all(&h[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_block(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format("block file shorter than its header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    let (rows, cols) = (word(0) as usize, word(1) as usize);
    if bytes.len() != 16 + rows * cols * 8 {
        return Err(Error::Format(format!("block file size does not match {rows}×{cols}")));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        let off = 16 + (i * cols + j) * 8;
        f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
    }))
}
