//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in order
//! on one thread and the timing comparisons are not disturbed by other tests.
//! Criteria listed in `KNOWN_FAILURES` are still evaluated and reported; they
//! do not fail the target, but an unexpected pass is reported too.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hydot::pipeline::{truth_shape, Layout, Problem};
use hydot::ExperimentConfig;
use hydot_core::born::{add_noise, forward_measure};
use hydot_core::grid::{FemMatrices, Grid};
use hydot_core::krylov::{FamilySolver, SolverConfig};
use hydot_core::lowrank::{aca_full, agglomerate, randsvd, LeafMethod, RandSvdOptions};
use hydot_core::optics::{shifts, wavelength_grid, ChromophoreTable, OpticalParams};
use hydot_core::pals::{perturbation_bounds, shape, shape_jacobian, PalsParams, ShapeConfig};
use hydot_core::sparse::CsrMatrix;

type Outcome = Result<(bool, String), Box<dyn Error>>;

/// Criteria that do not reach their threshold at desk scale; see README.
const KNOWN_FAILURES: &[u32] = &[10];

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str, out: &Path) -> Result<ExperimentConfig, Box<dyn Error>> {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(name))?;
    cfg.experiment.output_dir = out.join(name.trim_end_matches(".toml"));
    Ok(cfg)
}

/// Rows of a CSV file keyed by header.
fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, Box<dyn Error>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect())
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64, Box<dyn Error>> {
    Ok(row.get(key).ok_or_else(|| format!("missing column {key}"))?.parse()?)
}

fn to_csc(a: &CsrMatrix) -> CscMatrix<f64> {
    let n = a.dim();
    let mut coo = CooMatrix::new(n, n);
    for i in 0..n {
        for (j, v) in a.row(i) {
            coo.push(i, j, v);
        }
    }
    CscMatrix::from(&coo)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn c1_solver_vs_direct() -> Outcome {
    let grid = Grid::new(12, 12, 12, 3.0, 3.0, 3.0)?;
    let fem = FemMatrices::assemble(&grid);
    let table = ChromophoreTable::bundled();
    let params = OpticalParams::default();
    let sh = wavelength_grid(650.0, 950.0, 30).into_iter().map(|l| shifts(l, &table, &params)).collect::<Result<Vec<_>, _>>()?;
    let cfg = SolverConfig { tol: 1e-8, parallel: false, ..SolverConfig::default() };
    let mut b = grid.point_source_vector([0.4, -0.3, 2.2])?;
    fem.apply_dirichlet_rhs(&mut b);
    let t0 = Instant::now();
    let solver = FamilySolver::new(&fem.stiffness, &fem.lumped_mass, &fem.robin, &sh, cfg)?;
    let sol = solver.solve(&b)?;
    let secs = t0.elapsed().as_secs_f64();
    sol.check()?;
    let rhs = DMatrix::from_column_slice(b.len(), 1, &b);
    let mut worst = 0.0f64;
    for (x, &(s, sp)) in sol.x.iter().zip(&sh) {
        let chol = CscCholesky::factor(&to_csc(&fem.system_matrix(s, sp))).map_err(|e| format!("{e:?}"))?;
        let exact = chol.solve(&rhs);
        worst = worst.max(rel(x, exact.as_slice()));
    }
    Ok((worst <= 1e-7 && secs <= 60.0, format!("max rel err {worst:.2e} (≤ 1e-7) over 30 wavelengths, {secs:.2} s single-threaded (≤ 60 s)")))
}

fn c2_deflation(out: &Path) -> Outcome {
    let mut cfg = shipped("solver_bench.toml", out)?;
    cfg.bench.solver_k = vec![0, 10];
    let report = hydot::run(&cfg)?;
    let rows = read_csv(&report.output_dir.join("metrics.csv"))?;
    let iters = |k: &str| -> Result<f64, Box<dyn Error>> {
        let row = rows.iter().find(|r| r["k"] == k).ok_or("missing k row")?;
        num(row, "total_iters")
    };
    let (i0, i10) = (iters("0")?, iters("10")?);
    let pct = 100.0 * (i10 - i0) / i0;
    Ok((i10 < i0, format!("total iterations k=0: {i0}, k=10: {i10} ({pct:+.1}%) on 24³ × 100 wavelengths")))
}

fn fixture_10() -> Result<(ExperimentConfig, Problem), Box<dyn Error>> {
    let cfg = ExperimentConfig::parse(
        "[grid]\nnx = 10\nny = 10\nnz = 10\nlx = 3.0\nly = 3.0\nlz = 3.0\n\
         [setup]\nnum_sources = 4\ndetectors_per_source = 9\nnum_wavelengths = 11\n\
         [reconstruction]\nanomaly_center = [0.0, 0.0, 1.5]\nanomaly_radius = 1.0\n\
         [bench]\ncompress_sources = [4]\n",
    )?;
    let problem = Layout::new(&cfg, 4)?.with_fields()?;
    Ok((cfg, problem))
}

/// Smallest `k` whose discarded Frobenius tail is at most `tol`.
fn eps_rank(s: &[f64], tol: f64) -> usize {
    let mut tail = 0.0;
    let mut k = s.len();
    while k > 0 && (tail + s[k - 1] * s[k - 1]).sqrt() <= tol {
        tail += s[k - 1] * s[k - 1];
        k -= 1;
    }
    k
}

fn c3_c4_compression(cfg: &ExperimentConfig, problem: &Problem) -> Result<(Outcome, Vec<f64>), Box<dyn Error>> {
    let h = problem.dense_h();
    let t0 = Instant::now();
    let comp = problem.compress(1e-6, LeafMethod::RandSvd, cfg, cfg.stage_seed("compression"))?;
    let secs = t0.elapsed().as_secs_f64();
    let approx = comp.canonical().to_dense();
    let err = (&h - &approx).norm() / h.norm();
    let mut s: Vec<f64> = h.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let dense = eps_rank(&s, 1e-6 * h.norm());
    let rank = comp.factor.rank();
    let ok = err <= 1e-6 && rank as f64 <= 1.5 * dense as f64 && secs <= 120.0;
    let detail = format!("rel err {err:.2e} (≤ 1e-6), rank {rank} vs dense ε-rank {dense} (≤ 1.5×), {secs:.2} s (≤ 120 s); H is {}×{}", h.nrows(), h.ncols());
    Ok((Ok((ok, detail)), comp.deltas.clone()))
}

fn c5_speed(out: &Path, deltas: &mut Vec<f64>) -> Outcome {
    let cfg = shipped("compress_bench.toml", out)?;
    let report = hydot::run(&cfg)?;
    for row in read_csv(&report.output_dir.join("ranks.csv"))? {
        if let Some(d) = row.get("delta").filter(|d| !d.is_empty()) {
            deltas.push(d.parse()?);
        }
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for row in read_csv(&report.output_dir.join("timing.csv"))? {
        let (rec, dir) = (num(&row, "recursive_seconds")?, num(&row, "direct_seconds")?);
        ok &= rec <= dir;
        parts.push(format!("N_s={}: {rec:.2} s vs {dir:.2} s", row["n_sources"]));
    }
    Ok((ok && !parts.is_empty(), format!("recursive vs direct RandSVD — {}", parts.join(", "))))
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5).qr().q()
}

fn c6_agglomeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let eps = [1e-2, 1e-4, 1e-6][trial % 3];
        let n = rng.random_range(40..80);
        let shared = random_orthonormal(n, 30, &mut rng);
        let block = |rng: &mut ChaCha8Rng| {
            let m = rng.random_range(20..50);
            let k = 30.min(m);
            let decay: f64 = rng.random_range(0.3..0.8);
            let s = DMatrix::from_diagonal(&DVector::from_fn(k, |i, _| decay.powi(i as i32)));
            let v = &shared * random_orthonormal(30, k, rng);
            random_orthonormal(m, k, rng) * s * v.transpose()
        };
        let (h1, h2) = (block(&mut rng), block(&mut rng));
        let opts = RandSvdOptions::with_tol(eps);
        let (f1, _) = randsvd(&h1, &opts, &mut rng);
        let (f2, _) = randsvd(&h2, &opts, &mut rng);
        let (f, _) = agglomerate(&f1, &f2, &opts, &mut rng)?;
        let mut h = DMatrix::zeros(h1.nrows() + h2.nrows(), n);
        h.rows_mut(0, h1.nrows()).copy_from(&h1);
        h.rows_mut(h1.nrows(), h2.nrows()).copy_from(&h2);
        let err = (&h - f.to_dense()).norm();
        let bound = (2.0 * eps + eps * eps) * (h1.norm() + h2.norm());
        worst = worst.max(err / bound);
        violations += usize::from(err > bound);
    }
    Ok((violations == 0, format!("{violations} violations in 200 pairs; largest error/bound {worst:.3}")))
}

fn c7_aca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut wrong = Vec::new();
    for _ in 0..100 {
        let r = rng.random_range(1..=20);
        let (m, n) = (rng.random_range(25..60), rng.random_range(25..60));
        let u = DMatrix::from_fn(m, r, |_, _| rng.random::<f64>() - 0.5);
        let v = DMatrix::from_fn(n, r, |_, _| rng.random::<f64>() - 0.5);
        let res = aca_full(&(u * v.transpose()), 0.0);
        if res.steps != r {
            wrong.push(format!("r={r} took {}", res.steps));
        }
    }
    Ok((wrong.is_empty(), format!("{} of 100 exact-rank matrices (r ≤ 20) stopped after a step count other than r {}", wrong.len(), wrong.join("; "))))
}

fn random_params(grid: &Grid, n_p: usize, rng: &mut ChaCha8Rng) -> Result<PalsParams, Box<dyn Error>> {
    let [lx, ly, lz] = grid.extents;
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut centers = Vec::new();
    for _ in 0..n_p {
        alpha.push(rng.random_range(0.3..1.0));
        beta.push(rng.random_range(0.5..1.2) / lz.min(lx));
        centers.push([rng.random_range(-0.4..0.4) * lx, rng.random_range(-0.4..0.4) * ly, rng.random_range(0.3..0.7) * lz]);
    }
    Ok(PalsParams::new(alpha, beta, centers)?)
}

fn c8_jacobian() -> Outcome {
    let grid = Grid::new(13, 13, 11, 2.0, 2.0, 2.0)?;
    let cfg = ShapeConfig::for_grid(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut failures, mut columns) = (0, 0);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let p = random_params(&grid, rng.random_range(1..=4), &mut rng)?;
        let jac = shape_jacobian(&p, &grid, &cfg);
        let v = p.to_vec();
        for k in 0..v.len() {
            let h = 1e-7 * v[k].abs().max(1.0);
            let (mut plus, mut minus) = (v.clone(), v.clone());
            plus[k] += h;
            minus[k] -= h;
            let sp = shape(&PalsParams::from_vec(&plus)?, &grid, &cfg);
            let sm = shape(&PalsParams::from_vec(&minus)?, &grid, &cfg);
            let col = jac.column(k);
            let diff: f64 = (0..grid.num_vertices()).map(|n| (col[n] - (sp[n] - sm[n]) / (2.0 * h)).powi(2)).sum::<f64>().sqrt();
            let tol = 1e-6f64.max(1e-4 * col.norm());
            worst = worst.max(diff / tol);
            failures += usize::from(diff > tol);
            columns += 1;
        }
    }
    Ok((failures == 0, format!("{failures} failing columns of {columns} over 10 draws; largest error/tolerance {worst:.2e}")))
}

fn c9_exp1(out: &Path) -> Outcome {
    let cfg = shipped("exp1.toml", out)?;
    let report = hydot::run(&cfg)?;
    let rows = read_csv(&report.output_dir.join("metrics.csv"))?;
    let get = |tol: &str| rows.iter().find(|r| r["operator"] == "compressed" && r["tolerance"] == tol).ok_or("missing row");
    let l2 = |tol: &str| -> Result<f64, Box<dyn Error>> { num(get(tol)?, "l2_err") };
    let (a, b, c) = (l2("1e-3")?, l2("1e-6")?, l2("1e-9")?);
    let dice = rows.iter().map(|r| num(r, "dice")).collect::<Result<Vec<_>, _>>()?.into_iter().fold(1.0, f64::min);
    let (d69, d39) = (100.0 * (b - c).abs(), 100.0 * (a - c).abs());
    let ok = d69 < 0.5 && d39 < 2.0 && dice >= 0.7;
    Ok((ok, format!("L2 {:.2}% / {:.2}% / {:.2}% at 1e-3 / 1e-6 / 1e-9: |Δ| {d69:.3} pt (< 0.5), {d39:.3} pt (< 2); min Dice {dice:.3} (≥ 0.7)", 100.0 * a, 100.0 * b, 100.0 * c)))
}

fn species_errors(path: &Path) -> Result<(Vec<(String, f64)>, f64), Box<dyn Error>> {
    let rows = read_csv(path)?;
    let species = rows.iter().filter(|r| !r["true"].is_empty()).map(|r| Ok((r["quantity"].clone(), num(r, "error")?))).collect::<Result<Vec<_>, Box<dyn Error>>>()?;
    let dice = num(rows.iter().find(|r| r["quantity"] == "dice").ok_or("missing dice")?, "error")?;
    Ok((species, dice))
}

fn fmt_species(s: &[(String, f64)]) -> String {
    s.iter().map(|(n, e)| format!("{n} {:.1}%", 100.0 * e)).collect::<Vec<_>>().join(", ")
}

fn c10_exp2(out: &Path) -> Outcome {
    let cfg = shipped("exp2.toml", out)?;
    let report = hydot::run(&cfg)?;
    let (species, dice) = species_errors(&report.output_dir.join("metrics.csv"))?;
    let worst = species.iter().map(|s| s.1).fold(0.0, f64::max);
    Ok((species.len() == 4 && worst <= 0.10, format!("species errors {} (each ≤ 10%); Dice {dice:.3}", fmt_species(&species))))
}

fn c11_exp3(out: &Path) -> Outcome {
    let cfg = shipped("exp3.toml", out)?;
    let report = hydot::run(&cfg)?;
    let (species, dice) = species_errors(&report.output_dir.join("metrics.csv"))?;
    let worst = species.iter().map(|s| s.1).fold(0.0, f64::max);
    let curves = read_csv(&report.output_dir.join("born_vs_full.csv"))?.len();
    let ok = dice >= 0.5 && worst <= 0.15 && curves > 0;
    Ok((ok, format!("Dice {dice:.3} (≥ 0.5); species errors {} (each ≤ 15%); born_vs_full.csv has {curves} rows", fmt_species(&species))))
}

fn c12_perturbation(cfg: &ExperimentConfig, problem: &Problem) -> Outcome {
    let grid = &problem.layout.grid;
    let shape_cfg = cfg.reconstruction.shape_config(grid);
    let h = problem.dense_h();
    let comp = problem.compress(1e-3, LeafMethod::RandSvd, cfg, cfg.stage_seed("compression"))?;
    let h_hat = comp.canonical().to_dense();
    let contrast = problem.layout.setup.table.contrast();
    let (_, mu_true) = truth_shape(cfg, grid, &shape_cfg)?;
    let data = add_noise(&forward_measure(&h, &problem.extinction, &contrast, &mu_true)?, Some(40.0), 12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut violations, mut points) = (0, 0);
    let mut worst = 0.0f64;
    while points < 20 {
        let p = random_params(grid, 3, &mut rng)?;
        let mu = shape(&p, grid, &shape_cfg);
        let dmu = shape_jacobian(&p, grid, &shape_cfg);
        if dmu.amax() == 0.0 {
            continue;
        }
        let c: Vec<f64> = contrast.iter().map(|v| v * rng.random_range(0.5..1.5)).collect();
        let ec = &problem.extinction * DVector::from_column_slice(&c);
        let mut j = &h * &dmu;
        for (mut row, e) in j.row_iter_mut().zip(ec.iter()) {
            row *= data.weight * e;
        }
        let smax = j.singular_values().max();
        let nu = smax * smax * 10f64.powf(rng.random_range(-4.0..0.0));
        let rep = perturbation_bounds(&h, &h_hat, &problem.extinction, &c, data.weight, &data.y, &mu, &dmu, nu)?;
        violations += usize::from(!rep.holds());
        worst = worst.max(rep.dp_gap / rep.dp_bound).max(rep.f_gap / rep.f_bound).max(rep.grad_gap / rep.grad_bound);
        points += 1;
    }
    Ok((violations == 0, format!("{violations} violations over 20 linearisation points; largest gap/bound {worst:.3} (objective, gradient, LM direction); operator compressed at 1e-3")))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let out = dir.path();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |id: u32, outcome: Outcome| {
        let line = match &outcome {
            Ok((true, d)) => format!("criterion {id:>2}: PASS  {d}"),
            Ok((false, d)) => format!("criterion {id:>2}: FAIL  {d}"),
            Err(e) => format!("criterion {id:>2}: FAIL  error: {e}"),
        };
        println!("{line}");
        results.push((id, outcome));
    };

    report(1, c1_solver_vs_direct());
    report(2, c2_deflation(out));
    let fixture = fixture_10();
    let mut deltas = Vec::new();
    match &fixture {
        Ok((cfg, problem)) => match c3_c4_compression(cfg, problem) {
            Ok((outcome, d)) => {
                report(3, outcome);
                deltas = d;
            }
            Err(e) => report(3, Err(e)),
        },
        Err(e) => report(3, Err(e.to_string().into())),
    }
    let c5 = c5_speed(out, &mut deltas);
    let worst_delta = deltas.iter().copied().fold(0.0, f64::max);
    report(4, Ok((!deltas.is_empty() && worst_delta <= 1.0, format!("max δ {worst_delta:.3} over {} level pairs (≤ 1)", deltas.len()))));
    report(5, c5);
    report(6, c6_agglomeration());
    report(7, c7_aca());
    report(8, c8_jacobian());
    report(9, c9_exp1(out));
    report(10, c10_exp2(out));
    report(11, c11_exp3(out));
    match &fixture {
        Ok((cfg, problem)) => report(12, c12_perturbation(cfg, problem)),
        Err(e) => report(12, Err(e.to_string().into())),
    }

    let passed = results.iter().filter(|(_, o)| matches!(o, Ok((true, _)))).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    let mut unexpected = Vec::new();
    for (id, o) in &results {
        let pass = matches!(o, Ok((true, _)));
        match (pass, KNOWN_FAILURES.contains(id)) {
            (false, false) => unexpected.push(*id),
            (false, true) => println!("criterion {id:>2}: known failure at desk scale (documented in README)"),
            (true, true) => println!("criterion {id:>2}: listed as a known failure but now passes"),
            _ => {}
        }
    }
    if !unexpected.is_empty() {
        eprintln!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
