//! Experiment configuration: TOML with one table per stage. Every field has a
//! default, so a config file only lists what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hydot_core::grid::Grid;
use hydot_core::krylov::{Preconditioner, SolverConfig};
use hydot_core::lowrank::LeafMethod;
use hydot_core::optics::{ChromophoreTable, OpticalParams};
use hydot_core::pals::{ReconConfig, ShapeConfig};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Exp1,
    Exp2,
    Exp3,
    SolverBench,
    CompressBench,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Exp1 => "exp1",
            ExperimentKind::Exp2 => "exp2",
            ExperimentKind::Exp3 => "exp3",
            ExperimentKind::SolverBench => "solver-bench",
            ExperimentKind::CompressBench => "compress-bench",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    /// Worker threads, 0 for all cores.
    pub threads: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { kind: ExperimentKind::Exp1, output_dir: PathBuf::from("hydot-out"), seed: 2024, threads: 0 }
    }
}

/// Box `[−lx, lx] × [−ly, ly] × [0, lz]` (cm) with `nx × ny × nz` vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { nx: 21, ny: 21, nz: 11, lx: 6.0, ly: 6.0, lz: 5.0 }
    }
}

impl GridSection {
    pub fn build(&self) -> Result<Grid, HarnessError> {
        Grid::new(self.nx, self.ny, self.nz, self.lx, self.ly, self.lz).map_err(|e| HarnessError::Config(format!("[grid] {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetupSection {
    pub num_sources: usize,
    /// Spacing of the square source lattice centred on the top face (cm).
    pub source_pitch: f64,
    pub detectors_per_source: usize,
    /// Spacing of the square detector pattern under each source (cm).
    pub detector_pitch: f64,
    pub num_wavelengths: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for SetupSection {
    fn default() -> Self {
        Self { num_sources: 4, source_pitch: 1.5, detectors_per_source: 9, detector_pitch: hydot_core::born::DETECTOR_PITCH, num_wavelengths: 25, lambda_min: 650.0, lambda_max: 950.0 }
    }
}

impl SetupSection {
    /// Source positions on a centred square lattice, filled row by row.
    pub fn source_xy(&self, count: usize) -> Vec<(f64, f64)> {
        let side = (count as f64).sqrt().ceil() as usize;
        let rows = count.div_ceil(side);
        let off = |n: usize, i: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * self.source_pitch;
        (0..count).map(|k| (off(side, k % side), off(rows, k / side))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsSection {
    pub psi: f64,
    pub b: f64,
    pub lambda0: f64,
    pub nu: f64,
    pub a: f64,
}

impl Default for OpticsSection {
    fn default() -> Self {
        let p = OpticalParams::default();
        Self { psi: p.psi, b: p.b, lambda0: p.lambda0, nu: p.nu, a: p.a }
    }
}

impl OpticsSection {
    pub fn params(&self) -> OpticalParams {
        OpticalParams { psi: self.psi, b: self.b, lambda0: self.lambda0, nu: self.nu, a: self.a }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub n_arnoldi: usize,
    pub k: usize,
    pub m: usize,
    pub tol: f64,
    pub max_restarts: usize,
    pub center: bool,
    /// `none` or `jacobi`.
    pub preconditioner: String,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self { n_arnoldi: s.n_arnoldi, k: s.k, m: s.m, tol: s.tol, max_restarts: s.max_restarts, center: s.center, preconditioner: "none".into() }
    }
}

impl SolverSection {
    pub fn config(&self) -> Result<SolverConfig, HarnessError> {
        let preconditioner = match self.preconditioner.as_str() {
            "none" => Preconditioner::None,
            "jacobi" => Preconditioner::Jacobi,
            other => return Err(HarnessError::Config(format!("[solver] unknown preconditioner '{other}'"))),
        };
        let cfg = SolverConfig {
            n_arnoldi: self.n_arnoldi,
            k: self.k,
            m: self.m,
            tol: self.tol,
            max_restarts: self.max_restarts,
            center: self.center,
            preconditioner,
            parallel: true,
        };
        cfg.validate().map_err(|e| HarnessError::Config(format!("[solver] {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionSection {
    /// Tolerances swept by exp1.
    pub tolerances: Vec<f64>,
    /// Tolerance of the operator used by exp2 and exp3.
    pub tolerance: f64,
    /// Leaf compressor: `randsvd` or `aca`.
    pub method: String,
    pub oversample: usize,
    pub probes: usize,
}

impl Default for CompressionSection {
    fn default() -> Self {
        Self { tolerances: vec![1e-3, 1e-6, 1e-9], tolerance: 1e-6, method: "randsvd".into(), oversample: 20, probes: 10 }
    }
}

impl CompressionSection {
    pub fn leaf_method(&self) -> Result<LeafMethod, HarnessError> {
        match self.method.as_str() {
            "randsvd" => Ok(LeafMethod::RandSvd),
            "aca" => Ok(LeafMethod::AcaPartial),
            other => Err(HarnessError::Config(format!("[compression] unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionSection {
    /// Basis functions of the true shape.
    pub truth_basis: usize,
    /// Basis functions of the reconstruction.
    pub recon_basis: usize,
    pub anomaly_center: [f64; 3],
    /// Approximate radius of the true anomaly (cm).
    pub anomaly_radius: f64,
    /// SNR (dB) of the added noise; exp1 / exp2 / exp3.
    pub snr_exp1: f64,
    pub snr_exp2: f64,
    pub snr_exp3: f64,
    pub init_alpha: f64,
    /// Initial RBF width β; each basis function has support radius `1/β`.
    pub init_beta: f64,
    pub tau: f64,
    pub eps_h: f64,
    pub gamma: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_retries: usize,
    pub nu_init: f64,
    /// Re-solve concentrations inside every LM trial (joint experiments only).
    pub variable_projection: bool,
}

impl Default for ReconstructionSection {
    fn default() -> Self {
        let r = ReconConfig::default();
        Self {
            truth_basis: 3,
            recon_basis: 5,
            anomaly_center: [0.0, 0.0, 2.5],
            anomaly_radius: 1.2,
            snr_exp1: 33.0,
            snr_exp2: 30.0,
            snr_exp3: 50.0,
            init_alpha: 0.3,
            init_beta: 0.7,
            tau: 0.1,
            eps_h: 0.05,
            gamma: r.gamma,
            max_outer: r.max_outer,
            max_inner: r.max_inner,
            max_retries: r.max_retries,
            nu_init: r.nu_init,
            variable_projection: true,
        }
    }
}

impl ReconstructionSection {
    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            max_retries: self.max_retries,
            nu_init: self.nu_init,
            gamma: self.gamma,
            variable_projection: self.variable_projection,
            ..ReconConfig::default()
        }
    }

    pub fn shape_config(&self, grid: &Grid) -> ShapeConfig {
        ShapeConfig { tau: self.tau, eps_h: self.eps_h, ..ShapeConfig::for_grid(grid) }
    }

}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Deflation sizes compared by solver-bench.
    pub solver_k: Vec<usize>,
    /// Source counts swept by compress-bench.
    pub compress_sources: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { solver_k: vec![0, 5, 10, 15], compress_sources: vec![4, 8, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub grid: GridSection,
    pub setup: SetupSection,
    pub optics: OpticsSection,
    pub solver: SolverSection,
    pub compression: CompressionSection,
    pub reconstruction: ReconstructionSection,
    pub bench: BenchSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The fully populated default configuration as TOML.
    pub fn defaults_toml() -> String {
        toml::to_string_pretty(&Self::default()).expect("default config serialises")
    }

    /// Applies `HYDOT_THREADS` and `HYDOT_OUTDIR` style overrides from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), HarnessError> {
        if let Some(t) = lookup("HYDOT_THREADS") {
            self.experiment.threads = t.trim().parse().map_err(|_| HarnessError::Config(format!("HYDOT_THREADS = '{t}' is not a thread count")))?;
        }
        if let Some(dir) = lookup("HYDOT_OUTDIR") {
            if dir.is_empty() {
                return Err(HarnessError::Config("HYDOT_OUTDIR is empty".into()));
            }
            self.experiment.output_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    /// Seed of a named stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in stage.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        h ^ self.experiment.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        hydot_core::optics::wavelength_grid(self.setup.lambda_min, self.setup.lambda_max, self.setup.num_wavelengths)
    }

    /// Checks every section against the preconditions of the stage that uses it.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        let grid = self.grid.build()?;
        self.solver.config()?;
        self.compression.leaf_method()?;
        self.optics.params().validate().map_err(|e| HarnessError::Config(format!("[optics] {e}")))?;
        let s = &self.setup;
        if s.num_sources == 0 || s.num_wavelengths == 0 {
            return err("[setup] need at least one source and one wavelength".into());
        }
        if !(s.detector_pitch > 0.0 && s.source_pitch > 0.0) {
            return err("[setup] source and detector pitch must be positive".into());
        }
        let side = (s.detectors_per_source as f64).sqrt().round() as usize;
        if side * side != s.detectors_per_source || side == 0 {
            return err(format!("[setup] detectors_per_source = {} is not a perfect square", s.detectors_per_source));
        }
        let table = ChromophoreTable::bundled();
        let (lo, hi) = table.range();
        if !(s.lambda_min >= lo && s.lambda_max <= hi && s.lambda_min <= s.lambda_max) {
            return err(format!("[setup] wavelength range [{}, {}] outside tabulated [{lo}, {hi}]", s.lambda_min, s.lambda_max));
        }
        let counts = std::iter::once(s.num_sources).chain(self.bench.compress_sources.iter().copied());
        for n in counts {
            for (x, y) in s.source_xy(n) {
                let reach = (side as f64 - 1.0) / 2.0 * s.detector_pitch;
                if x.abs() + reach >= grid.extents[0] || y.abs() + reach >= grid.extents[1] {
                    return err(format!("[setup] {n} sources at pitch {} do not fit inside the box", s.source_pitch));
                }
            }
        }
        let c = &self.compression;
        if c.tolerances.is_empty() || c.tolerances.iter().chain([&c.tolerance]).any(|t| !(*t > 0.0 && *t < 1.0)) {
            return err("[compression] tolerances must lie in (0, 1)".into());
        }
        let r = &self.reconstruction;
        if r.truth_basis == 0 || r.recon_basis == 0 {
            return err("[reconstruction] basis counts must be positive".into());
        }
        if !(r.anomaly_radius > 0.0 && r.eps_h > 0.0 && r.init_beta > 0.0 && r.init_alpha.is_finite()) {
            return err("[reconstruction] anomaly_radius, eps_h and init_beta must be positive".into());
        }
        r.recon_config().validate().map_err(|e| HarnessError::Config(format!("[reconstruction] {e}")))?;
        let [cx, cy, cz] = r.anomaly_center;
        if cx.abs() >= grid.extents[0] || cy.abs() >= grid.extents[1] || cz <= 0.0 || cz >= grid.extents[2] {
            return err("[reconstruction] anomaly centre outside the box".into());
        }
        if self.bench.solver_k.iter().any(|&k| k >= self.solver.m || k > self.solver.n_arnoldi) {
            return err("[bench] every solver_k must be below m and at most n_arnoldi".into());
        }
        if self.bench.compress_sources.contains(&0) {
            return err("[bench] source counts must be positive".into());
        }
        Ok(())
    }
}
