//! The five experiment drivers. Each writes its files into the output
//! directory as it goes, so a failing stage leaves earlier results in place.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use hydot_core::born::{add_noise, compute_fields, forward_measure, FieldSet, NoisyData};
use hydot_core::lowrank::{randsvd, LinearOperator, RandSvdOptions, RecursiveResult};
use hydot_core::optics::shifts;
use hydot_core::pals::{reconstruct, shape_metrics, write_trace, InverseProblem, PalsParams, Reconstruction, ShapeMetrics};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::output::{Csv, OutputDir, Sci};
use crate::pipeline::{full_scattered, truth_shape, Layout, Problem};
use crate::{HarnessError, StageExt};

type Res<T> = Result<T, HarnessError>;

#[derive(Debug, Clone)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    /// Files written, relative to `output_dir`, in write order.
    pub files: Vec<String>,
    pub summary: Value,
}

/// Runs the configured experiment and writes `summary.json` last; on failure
/// the summary records the error and the files already written.
pub fn run(cfg: &ExperimentConfig) -> Res<RunReport> {
    cfg.validate()?;
    let mut out = OutputDir::create(&cfg.experiment.output_dir)?;
    let kind = cfg.experiment.kind;
    log::info!("running {} into {}", kind.name(), out.root().display());
    let mut summary = json!({
        "kind": kind.name(),
        "seeds": {
            "master": cfg.experiment.seed,
            "noise": cfg.stage_seed("noise"),
            "init": cfg.stage_seed("init"),
            "compression": cfg.stage_seed("compression"),
        },
        "config": serde_json::to_value(cfg).expect("config serialises"),
    });
    let result = match kind {
        ExperimentKind::Exp1 => exp1(cfg, &mut out),
        ExperimentKind::Exp2 => joint_experiment(cfg, &mut out, false),
        ExperimentKind::Exp3 => joint_experiment(cfg, &mut out, true),
        ExperimentKind::SolverBench => solver_bench(cfg, &mut out),
        ExperimentKind::CompressBench => compress_bench(cfg, &mut out),
    };
    match result {
        Ok(results) => {
            summary["status"] = json!("ok");
            summary["results"] = results;
            summary["files"] = json!(out.files());
            out.write_json("summary.json", &summary)?;
            Ok(RunReport { kind, output_dir: out.root().to_path_buf(), files: out.files().to_vec(), summary })
        }
        Err(e) => {
            summary["status"] = json!("failed");
            if let HarnessError::Stage { stage, .. } = &e {
                summary["failed_stage"] = json!(stage);
            }
            summary["error"] = json!(e.to_string());
            summary["files"] = json!(out.files());
            // The original error matters more than a failure to record it.
            let _ = out.write_json("summary.json", &summary);
            Err(e)
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn write_solver_telemetry(table: &mut Csv, k: usize, layout: &Layout, fields: &FieldSet) -> Res<()> {
    let sh: Vec<(f64, f64)> = layout
        .setup
        .wavelengths
        .iter()
        .map(|&l| shifts(l, &layout.setup.table, &layout.params))
        .collect::<hydot_core::Result<_>>()
        .stage("fields")?;
    for (family, stats) in &fields.solves {
        for ((l, (s, sp)), st) in layout.setup.wavelengths.iter().zip(&sh).zip(stats) {
            table.row(&[&k, family, l, &Sci(*s), &Sci(*sp), &st.iters, &st.matvecs, &Sci(st.relres)]);
        }
    }
    Ok(())
}

const TELEMETRY_HEADER: [&str; 8] = ["k", "family", "wavelength_nm", "sigma", "sigma_prime", "iters", "matvecs", "final_relres"];

fn fields_stage(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Problem> {
    let layout = Layout::new(cfg, cfg.setup.num_sources)?;
    let problem = layout.with_fields()?;
    let mut tel = Csv::new(&TELEMETRY_HEADER);
    write_solver_telemetry(&mut tel, cfg.solver.k, &problem.layout, &problem.fields)?;
    out.write_csv("telemetry.csv", &tel)?;
    let (inc, adj) = (&problem.fields.incident[0][0], &problem.fields.adjoint[0][0][0]);
    out.write_vtk("fields.vtk", &problem.layout.grid, "incident and adjoint fluence", &[("incident_s0", inc), ("adjoint_s0_d0", adj)])?;
    Ok(problem)
}

fn ranks_rows(table: &mut Csv, label: &dyn std::fmt::Display, comp: &RecursiveResult) {
    for (i, level) in comp.levels.iter().enumerate() {
        let delta = comp.deltas.get(i).map(|d| format!("{d:.6}")).unwrap_or_default();
        table.row(&[label, &level.level, &level.max_rank, &level.blocks, &delta]);
    }
}

struct Inversion {
    rec: Reconstruction,
    metrics: ShapeMetrics,
    seconds: f64,
}

fn invert(cfg: &ExperimentConfig, problem: &Problem, op: &dyn LinearOperator, data: &NoisyData, known_c: Option<Vec<f64>>, truth: &[f64]) -> Res<Inversion> {
    let grid = &problem.layout.grid;
    let r = &cfg.reconstruction;
    let shape_cfg = r.shape_config(grid);
    let init = PalsParams::initial(grid, r.recon_basis, r.init_alpha, r.init_beta, cfg.stage_seed("init")).stage("reconstruction")?;
    let inverse = InverseProblem { op, extinction: &problem.extinction, y: &data.y, weight: data.weight, grid, shape: shape_cfg };
    let recon_cfg = hydot_core::pals::ReconConfig { known_c, ..r.recon_config() };
    let t0 = Instant::now();
    let rec = reconstruct(&inverse, init, data.weight * norm(&data.eta), &recon_cfg, Some(truth)).stage("reconstruction")?;
    let seconds = t0.elapsed().as_secs_f64();
    let metrics = shape_metrics(truth, &rec.mu, 0.5);
    Ok(Inversion { rec, metrics, seconds })
}

fn trace_file(out: &mut OutputDir, name: &str, rec: &Reconstruction) -> Res<()> {
    let mut buf = Vec::new();
    write_trace(&mut buf, &rec.trace).stage("output")?;
    out.write_text(name, &String::from_utf8(buf).expect("trace is UTF-8"))
}

fn outer_iters(rec: &Reconstruction) -> usize {
    rec.trace.last().map(|t| t.outer + 1).unwrap_or(0)
}

/// Shape-only reconstructions with known concentrations from dense-Born data,
/// once per compression tolerance and once with the dense operator.
fn exp1(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let problem = fields_stage(cfg, out)?;
    let grid = &problem.layout.grid;
    let shape_cfg = cfg.reconstruction.shape_config(grid);
    let (_, mu) = truth_shape(cfg, grid, &shape_cfg)?;
    let c_true = problem.layout.setup.table.contrast();
    let h = problem.dense_h();
    let y = forward_measure(&h, &problem.extinction, &c_true, &mu).stage("forward")?;
    let data = add_noise(&y, Some(cfg.reconstruction.snr_exp1), cfg.stage_seed("noise")).stage("forward")?;
    let leaf = cfg.compression.leaf_method()?;

    let mut metrics = Csv::new(&["operator", "tolerance", "rank", "l2_err", "dice", "outer_iters", "resnorm", "stop"]);
    let mut timing = Csv::new(&["operator", "tolerance", "compress_seconds", "reconstruct_seconds"]);
    let mut ranks = Csv::new(&["tolerance", "level", "max_rank", "blocks", "delta"]);
    let mut shapes: Vec<(String, Vec<f64>)> = vec![("truth".into(), mu.clone())];
    let mut rows = Vec::new();
    for &tol in &cfg.compression.tolerances {
        let t0 = Instant::now();
        let comp = problem.compress(tol, leaf, cfg, cfg.stage_seed("compression"))?;
        let tc = t0.elapsed().as_secs_f64();
        let f = comp.canonical();
        let inv = invert(cfg, &problem, &f, &data, Some(c_true.clone()), &mu)?;
        let label = format!("{tol:e}");
        metrics.row(&[&"compressed", &label, &f.rank(), &Sci(inv.metrics.l2_rel), &Sci(inv.metrics.dice), &outer_iters(&inv.rec), &Sci(inv.rec.resnorm), &format!("{:?}", inv.rec.stop)]);
        timing.row(&[&"compressed", &label, &format!("{tc:.3}"), &format!("{:.3}", inv.seconds)]);
        ranks_rows(&mut ranks, &label, &comp);
        trace_file(out, &format!("trace_{label}.csv"), &inv.rec)?;
        rows.push(json!({"tolerance": tol, "rank": f.rank(), "l2_err": inv.metrics.l2_rel, "dice": inv.metrics.dice, "stop": format!("{:?}", inv.rec.stop)}));
        shapes.push((format!("recon_{label}"), inv.rec.mu));
    }
    let inv = invert(cfg, &problem, &h, &data, Some(c_true), &mu)?;
    let full = h.nrows().min(h.ncols());
    metrics.row(&[&"dense", &"", &full, &Sci(inv.metrics.l2_rel), &Sci(inv.metrics.dice), &outer_iters(&inv.rec), &Sci(inv.rec.resnorm), &format!("{:?}", inv.rec.stop)]);
    timing.row(&[&"dense", &"", &"0.000", &format!("{:.3}", inv.seconds)]);
    trace_file(out, "trace_dense.csv", &inv.rec)?;
    let dense = json!({"l2_err": inv.metrics.l2_rel, "dice": inv.metrics.dice, "stop": format!("{:?}", inv.rec.stop)});
    shapes.push(("recon_dense".into(), inv.rec.mu));

    out.write_csv("metrics.csv", &metrics)?;
    out.write_csv("timing.csv", &timing)?;
    out.write_csv("ranks.csv", &ranks)?;
    let views: Vec<(&str, &[f64])> = shapes.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    out.write_vtk("shapes.vtk", grid, "true and reconstructed anomaly", &views)?;
    Ok(json!({
        "measurements": h.nrows(),
        "unknowns": h.ncols(),
        "snr_db": cfg.reconstruction.snr_exp1,
        "compressed": rows,
        "dense": dense,
    }))
}

/// Joint shape and concentration recovery with the compressed operator, from
/// dense-Born data (`full_model = false`) or from the full diffusion model.
fn joint_experiment(cfg: &ExperimentConfig, out: &mut OutputDir, full_model: bool) -> Res<Value> {
    let problem = fields_stage(cfg, out)?;
    let layout = &problem.layout;
    let grid = &layout.grid;
    let shape_cfg = cfg.reconstruction.shape_config(grid);
    let (_, mu) = truth_shape(cfg, grid, &shape_cfg)?;
    let c_true = layout.setup.table.contrast();
    let h = problem.dense_h();
    let born = forward_measure(&h, &problem.extinction, &c_true, &mu).stage("forward")?;
    let mut extra = json!({});
    let (clean, snr) = if full_model {
        let t0 = Instant::now();
        let full = full_scattered(grid, &layout.fem, &layout.setup, &layout.params, &mu, &c_true).stage("full-forward")?;
        let diff: Vec<f64> = full.iter().zip(&born).map(|(a, b)| a - b).collect();
        let model_snr = 20.0 * (norm(&full) / norm(&diff)).log10();
        let mut curves = Csv::new(&["source", "detector", "wavelength_nm", "born", "full"]);
        for s in 0..layout.setup.num_sources() {
            for d in 0..layout.setup.detectors_per_source() {
                for (j, l) in layout.setup.wavelengths.iter().enumerate() {
                    let i = layout.setup.row_index(s, d, j);
                    curves.row(&[&s, &d, l, &Sci(born[i]), &Sci(full[i])]);
                }
            }
        }
        out.write_csv("born_vs_full.csv", &curves)?;
        extra = json!({
            "modeling_snr_db": model_snr,
            "born_vs_full_rel_diff": norm(&diff) / norm(&full),
            "full_forward_seconds": t0.elapsed().as_secs_f64(),
        });
        (full, cfg.reconstruction.snr_exp3)
    } else {
        (born, cfg.reconstruction.snr_exp2)
    };
    let data = add_noise(&clean, Some(snr), cfg.stage_seed("noise")).stage("forward")?;
    let t0 = Instant::now();
    let comp = problem.compress(cfg.compression.tolerance, cfg.compression.leaf_method()?, cfg, cfg.stage_seed("compression"))?;
    let tc = t0.elapsed().as_secs_f64();
    let f = comp.canonical();
    let inv = invert(cfg, &problem, &f, &data, None, &mu)?;

    let mut metrics = Csv::new(&["quantity", "true", "estimate", "error"]);
    let mut errors = Vec::new();
    for (l, name) in layout.setup.table.species.iter().enumerate() {
        let err = (inv.rec.c[l] - c_true[l]).abs() / c_true[l].abs();
        metrics.row(&[name, &Sci(c_true[l]), &Sci(inv.rec.c[l]), &Sci(err)]);
        errors.push(json!({"species": name, "true": c_true[l], "estimate": inv.rec.c[l], "rel_err": err}));
    }
    metrics.row(&[&"shape_l2", &"", &"", &Sci(inv.metrics.l2_rel)]);
    metrics.row(&[&"dice", &"", &"", &Sci(inv.metrics.dice)]);
    metrics.row(&[&"rank", &"", &f.rank(), &""]);
    out.write_csv("metrics.csv", &metrics)?;
    let mut timing = Csv::new(&["stage", "seconds"]);
    timing.row(&[&"compression", &format!("{tc:.3}")]);
    timing.row(&[&"reconstruction", &format!("{:.3}", inv.seconds)]);
    out.write_csv("timing.csv", &timing)?;
    let mut ranks = Csv::new(&["tolerance", "level", "max_rank", "blocks", "delta"]);
    ranks_rows(&mut ranks, &format!("{:e}", cfg.compression.tolerance), &comp);
    out.write_csv("ranks.csv", &ranks)?;
    trace_file(out, "trace.csv", &inv.rec)?;
    out.write_vtk("shapes.vtk", grid, "true and reconstructed anomaly", &[("truth", &mu), ("recon", &inv.rec.mu)])?;
    Ok(json!({
        "snr_db": snr,
        "rank": f.rank(),
        "concentrations": errors,
        "l2_err": inv.metrics.l2_rel,
        "dice": inv.metrics.dice,
        "stop": format!("{:?}", inv.rec.stop),
        "degenerate": inv.rec.degenerate,
        "data_model": if full_model { "full-diffusion" } else { "born" },
        "model": extra,
    }))
}

/// Total Krylov iterations of every field family for each deflation size.
fn solver_bench(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let layout = Layout::new(cfg, cfg.setup.num_sources)?;
    let mut metrics = Csv::new(&["k", "families", "systems", "total_iters", "total_matvecs", "max_relres", "iters_vs_k0_pct"]);
    let mut timing = Csv::new(&["k", "seconds"]);
    let mut tel = Csv::new(&TELEMETRY_HEADER);
    let mut rows = Vec::new();
    let mut base: Option<usize> = None;
    for &k in &cfg.bench.solver_k {
        let solver = hydot_core::krylov::SolverConfig { k, ..layout.solver.clone() };
        let t0 = Instant::now();
        let fields = compute_fields(&layout.grid, &layout.fem, &layout.setup, &layout.params, solver).stage("fields")?;
        let secs = t0.elapsed().as_secs_f64();
        let iters = fields.total_iterations();
        let matvecs: usize = fields.solves.iter().flat_map(|(_, s)| s.iter().map(|x| x.matvecs)).sum();
        let systems: usize = fields.solves.iter().map(|(_, s)| s.len()).sum();
        let relres = fields.solves.iter().flat_map(|(_, s)| s.iter().map(|x| x.relres)).fold(0.0, f64::max);
        let pct = if k == 0 { base = Some(iters); Some(0.0) } else { base.filter(|&b| b > 0).map(|b| 100.0 * (iters as f64 - b as f64) / b as f64) };
        let pct_cell = pct.map(|p| format!("{p:.2}")).unwrap_or_default();
        metrics.row(&[&k, &fields.solves.len(), &systems, &iters, &matvecs, &Sci(relres), &pct_cell]);
        timing.row(&[&k, &format!("{secs:.3}")]);
        write_solver_telemetry(&mut tel, k, &layout, &fields)?;
        rows.push(json!({"k": k, "total_iters": iters, "total_matvecs": matvecs, "iters_vs_k0_pct": pct, "seconds": secs}));
    }
    out.write_csv("metrics.csv", &metrics)?;
    out.write_csv("timing.csv", &timing)?;
    out.write_csv("telemetry.csv", &tel)?;
    Ok(json!({ "runs": rows }))
}

/// Recursive compression against direct RandSVD of the assembled operator for
/// a sweep of source counts.
fn compress_bench(cfg: &ExperimentConfig, out: &mut OutputDir) -> Res<Value> {
    let eps_d = cfg.compression.tolerance;
    let leaf = cfg.compression.leaf_method()?;
    let mut metrics = Csv::new(&[
        "n_sources",
        "rows",
        "cols",
        "levels",
        "recursive_rank",
        "direct_rank",
        "recursive_rel_err",
        "direct_rel_err",
        "flops_leaf",
        "flops_agglomeration",
        "flops_recompression",
        "direct_flops",
    ]);
    let mut timing = Csv::new(&["n_sources", "recursive_seconds", "direct_seconds"]);
    let mut ranks = Csv::new(&["n_sources", "level", "max_rank", "blocks", "delta"]);
    let mut rows = Vec::new();
    for &ns in &cfg.bench.compress_sources {
        let problem = Layout::new(cfg, ns)?.with_fields()?;
        let t0 = Instant::now();
        let comp = problem.compress(eps_d, leaf, cfg, cfg.stage_seed("compression"))?;
        let t_rec = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let h = problem.dense_h();
        let opts = RandSvdOptions { tol: eps_d, oversample: cfg.compression.oversample, probes: cfg.compression.probes, initial_rank: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("compression"));
        let (direct, direct_flops) = randsvd(&h, &opts, &mut rng);
        let t_dir = t0.elapsed().as_secs_f64();
        let f = comp.canonical();
        let hn = h.norm();
        let rec_err = (f.to_dense() - &h).norm() / hn;
        let dir_err = (direct.to_dense() - &h).norm() / hn;
        metrics.row(&[
            &ns,
            &h.nrows(),
            &h.ncols(),
            &comp.num_levels,
            &f.rank(),
            &direct.rank(),
            &Sci(rec_err),
            &Sci(dir_err),
            &comp.flops.leaf(),
            &comp.flops.agglomeration(),
            &comp.flops.recompression(),
            &direct_flops,
        ]);
        timing.row(&[&ns, &format!("{t_rec:.3}"), &format!("{t_dir:.3}")]);
        ranks_rows(&mut ranks, &ns, &comp);
        rows.push(json!({
            "n_sources": ns,
            "recursive_rank": f.rank(),
            "direct_rank": direct.rank(),
            "recursive_rel_err": rec_err,
            "direct_rel_err": dir_err,
            "recursive_seconds": t_rec,
            "direct_seconds": t_dir,
            "deltas": comp.deltas,
            "tree": problem.tree.nested(),
        }));
    }
    out.write_csv("metrics.csv", &metrics)?;
    out.write_csv("timing.csv", &timing)?;
    out.write_csv("ranks.csv", &ranks)?;
    Ok(json!({ "eps_d": eps_d, "runs": rows }))
}
