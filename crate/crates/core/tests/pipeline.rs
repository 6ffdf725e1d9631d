//! Fields → sensitivity blocks → recursive compression → level-set inversion
//! on a small slab.

use nalgebra::DMatrix;

use hydot_core::born::{assemble_h, assemble_h_block, compute_fields, forward_measure, MeasurementSetup};
use hydot_core::grid::{FemMatrices, Grid};
use hydot_core::krylov::SolverConfig;
use hydot_core::lowrank::{build_cluster_tree, recursive_lowrank, LinearOperator, LowRankFactor, RecursiveOptions};
use hydot_core::optics::{wavelength_grid, ChromophoreTable, OpticalParams};
use hydot_core::pals::{reconstruct, shape, shape_metrics, InverseProblem, PalsParams, ReconConfig, ShapeConfig};

struct Factor(LowRankFactor);

impl LinearOperator for Factor {
    fn nrows(&self) -> usize {
        self.0.rows()
    }
    fn ncols(&self) -> usize {
        self.0.cols()
    }
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        hydot_core::lowrank::lr_matvec(&self.0, x).unwrap()
    }
    fn rmatvec(&self, y: &[f64]) -> Vec<f64> {
        hydot_core::lowrank::lr_rmatvec(&self.0, y).unwrap()
    }
}

#[test]
fn compressed_operator_inverts_its_own_data() {
    let grid = Grid::new(13, 13, 9, 3.0, 3.0, 2.5).unwrap();
    let fem = FemMatrices::assemble(&grid);
    let xy = [(-0.75, -0.75), (0.75, -0.75), (-0.75, 0.75), (0.75, 0.75)];
    let setup = MeasurementSetup::slab(&grid, &xy, 9, wavelength_grid(650.0, 950.0, 5), ChromophoreTable::bundled()).unwrap();
    let params = OpticalParams::default();
    let fields = compute_fields(&grid, &fem, &setup, &params, SolverConfig::default()).unwrap();
    let extinction = setup.extinction_rows().unwrap();

    let h = assemble_h(&fields, &fem.lumped_mass);
    let points: Vec<[f64; 2]> = xy.iter().map(|&(x, y)| [x, y]).collect();
    let tree = build_cluster_tree(&points, [-3.0, -3.0], [3.0, 3.0]).unwrap();
    let provider = |s: usize| Ok(assemble_h_block(&fields, s, &fem.lumped_mass));
    let opts = RecursiveOptions { eps_d: 1e-8, seed: 5, ..RecursiveOptions::default() };
    let comp = recursive_lowrank(&tree, &provider, setup.block_rows(), grid.num_vertices(), &opts).unwrap();
    let op = Factor(comp.canonical());
    let dense = op.matmat(&DMatrix::identity(grid.num_vertices(), grid.num_vertices()));
    assert!((&h - &dense).norm() <= 1e-8 * h.norm());

    let shape_cfg = ShapeConfig { eps_h: 0.3, ..ShapeConfig::for_grid(&grid) };
    let truth = PalsParams::new(vec![1.0, 0.9], vec![0.6, 0.6], vec![[0.3, 0.0, 1.3], [-0.3, 0.2, 1.2]]).unwrap();
    let mu_true = shape(&truth, &grid, &shape_cfg);
    let c = setup.table.contrast();
    let y = forward_measure(&op, &extinction, &c, &mu_true).unwrap();
    let y_dense = forward_measure(&h, &extinction, &c, &mu_true).unwrap();
    let diff: f64 = y.iter().zip(&y_dense).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = y_dense.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff <= 1e-7 * norm);

    let weight = (y.len() as f64).sqrt() / norm;
    let problem = InverseProblem { op: &op, extinction: &extinction, y: &y, weight, grid: &grid, shape: shape_cfg };
    let init = PalsParams::initial(&grid, 3, 0.5, 0.6, 11).unwrap();
    let start = shape_metrics(&mu_true, &shape(&init, &grid, &shape_cfg), 0.5);
    let cfg = ReconConfig { known_c: Some(c.clone()), max_outer: 30, ..ReconConfig::default() };
    let rec = reconstruct(&problem, init, 1e-3 * weight * norm, &cfg, Some(&mu_true)).unwrap();
    let first = rec.trace[0].resnorm;
    let end = shape_metrics(&mu_true, &rec.mu, 0.5);
    assert!(rec.resnorm <= 0.1 * first, "residual {first} -> {}", rec.resnorm);
    assert!(end.dice > start.dice && end.dice >= 0.6, "Dice {} -> {}", start.dice, end.dice);
    assert_eq!(rec.c, c);
}
