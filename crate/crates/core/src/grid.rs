//! Regular hexahedral slab discretisation and trilinear finite-element assembly.
//!
//! The domain is the box `[-Lx, Lx] × [-Ly, Ly] × [0, Lz]`. Vertices are numbered
//! x-fastest: `n = ix + nx * (iy + ny * iz)`. The lateral faces carry homogeneous
//! Dirichlet conditions; the `z = 0` and `z = Lz` planes are Robin faces.

use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Boundary label of a face of the box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Dirichlet,
    Robin,
}

/// Uniform hexahedral grid over the slab phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Half extents in x and y, full thickness in z (cm).
    pub extents: [f64; 3],
    /// Cell sizes (cm).
    pub spacing: [f64; 3],
}

/// One-dimensional linear-element stiffness and mass blocks on an interval of length `h`.
fn stiffness_1d(h: f64) -> [[f64; 2]; 2] {
    [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]]
}

fn mass_1d(h: f64) -> [[f64; 2]; 2] {
    [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]]
}

/// Local vertex `a` of a cell has offsets `(a & 1, (a >> 1) & 1, (a >> 2) & 1)`.
fn local_offsets(a: usize) -> (usize, usize, usize) {
    (a & 1, (a >> 1) & 1, (a >> 2) & 1)
}

/// Analytic 8×8 stiffness matrix of a trilinear brick with edge lengths `h`.
pub fn hex_stiffness(h: [f64; 3]) -> [[f64; 8]; 8] {
    let (kx, ky, kz) = (stiffness_1d(h[0]), stiffness_1d(h[1]), stiffness_1d(h[2]));
    let (mx, my, mz) = (mass_1d(h[0]), mass_1d(h[1]), mass_1d(h[2]));
    let mut out = [[0.0; 8]; 8];
    for (a, row) in out.iter_mut().enumerate() {
        let (ax, ay, az) = local_offsets(a);
        for (b, v) in row.iter_mut().enumerate() {
            let (bx, by, bz) = local_offsets(b);
            *v = kx[ax][bx] * my[ay][by] * mz[az][bz]
                + mx[ax][bx] * ky[ay][by] * mz[az][bz]
                + mx[ax][bx] * my[ay][by] * kz[az][bz];
        }
    }
    out
}

/// Analytic 8×8 consistent mass matrix of a trilinear brick.
pub fn hex_mass(h: [f64; 3]) -> [[f64; 8]; 8] {
    let (mx, my, mz) = (mass_1d(h[0]), mass_1d(h[1]), mass_1d(h[2]));
    let mut out = [[0.0; 8]; 8];
    for (a, row) in out.iter_mut().enumerate() {
        let (ax, ay, az) = local_offsets(a);
        for (b, v) in row.iter_mut().enumerate() {
            let (bx, by, bz) = local_offsets(b);
            *v = mx[ax][bx] * my[ay][by] * mz[az][bz];
        }
    }
    out
}

/// Analytic 4×4 mass matrix of a bilinear quadrilateral face, local vertex `a = ax + 2 ay`.
pub fn quad_mass(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let (mx, my) = (mass_1d(hx), mass_1d(hy));
    let mut out = [[0.0; 4]; 4];
    for (a, row) in out.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = mx[a & 1][b & 1] * my[a >> 1][b >> 1];
        }
    }
    out
}

impl Grid {
    /// Builds the grid with `nx × ny × nz` vertices over `[-lx, lx] × [-ly, ly] × [0, lz]`.
    pub fn new(nx: usize, ny: usize, nz: usize, lx: f64, ly: f64, lz: f64) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::InvalidGrid(format!(
                "vertex counts must be at least 2, got ({nx}, {ny}, {nz})"
            )));
        }
        for (name, v) in [("Lx", lx), ("Ly", ly), ("Lz", lz)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            nx,
            ny,
            nz,
            extents: [lx, ly, lz],
            spacing: [
                2.0 * lx / (nx - 1) as f64,
                2.0 * ly / (ny - 1) as f64,
                lz / (nz - 1) as f64,
            ],
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn num_cells(&self) -> usize {
        (self.nx - 1) * (self.ny - 1) * (self.nz - 1)
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    pub fn coords(&self, n: usize) -> (usize, usize, usize) {
        let ix = n % self.nx;
        let iy = (n / self.nx) % self.ny;
        let iz = n / (self.nx * self.ny);
        (ix, iy, iz)
    }

    pub fn origin(&self) -> [f64; 3] {
        [-self.extents[0], -self.extents[1], 0.0]
    }

    pub fn position(&self, n: usize) -> [f64; 3] {
        let (ix, iy, iz) = self.coords(n);
        let o = self.origin();
        [
            o[0] + ix as f64 * self.spacing[0],
            o[1] + iy as f64 * self.spacing[1],
            o[2] + iz as f64 * self.spacing[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        4.0 * self.extents[0] * self.extents[1] * self.extents[2]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Boundary label of the face a boundary vertex sits on; `None` for interior vertices.
    /// Lateral faces take precedence on shared edges.
    pub fn boundary_kind(&self, n: usize) -> Option<BoundaryKind> {
        let (ix, iy, iz) = self.coords(n);
        if ix == 0 || ix == self.nx - 1 || iy == 0 || iy == self.ny - 1 {
            Some(BoundaryKind::Dirichlet)
        } else if iz == 0 || iz == self.nz - 1 {
            Some(BoundaryKind::Robin)
        } else {
            None
        }
    }

    pub fn dirichlet_mask(&self) -> Vec<bool> {
        (0..self.num_vertices())
            .map(|n| self.boundary_kind(n) == Some(BoundaryKind::Dirichlet))
            .collect()
    }

    fn cell_vertices(&self, cx: usize, cy: usize, cz: usize) -> [usize; 8] {
        let mut out = [0; 8];
        for (a, v) in out.iter_mut().enumerate() {
            let (ax, ay, az) = local_offsets(a);
            *v = self.index(cx + ax, cy + ay, cz + az);
        }
        out
    }

    fn assemble_cells(&self, local: &[[f64; 8]; 8]) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.num_cells() * 64);
        for cz in 0..self.nz - 1 {
            for cy in 0..self.ny - 1 {
                for cx in 0..self.nx - 1 {
                    let verts = self.cell_vertices(cx, cy, cz);
                    for a in 0..8 {
                        for b in 0..8 {
                            triplets.push((verts[a], verts[b], local[a][b]));
                        }
                    }
                }
            }
        }
        CsrMatrix::from_triplets(self.num_vertices(), triplets)
    }

    /// Stiffness matrix `∫ ∇u_k · ∇u_j` before any boundary condition is applied.
    pub fn assemble_stiffness_unconstrained(&self) -> CsrMatrix {
        self.assemble_cells(&hex_stiffness(self.spacing))
    }

    /// Stiffness matrix with Dirichlet vertices eliminated symmetrically (unit diagonal).
    pub fn assemble_stiffness(&self) -> CsrMatrix {
        self.assemble_stiffness_unconstrained().eliminate(&self.dirichlet_mask(), 1.0)
    }

    /// Mass matrix. `lumped = true` returns the row-sum lumped diagonal.
    pub fn assemble_mass(&self, lumped: bool) -> CsrMatrix {
        if lumped {
            CsrMatrix::from_diagonal(&self.lumped_mass())
        } else {
            self.assemble_cells(&hex_mass(self.spacing))
        }
    }

    /// Row sums of the consistent mass matrix, computed cell by cell.
    pub fn lumped_mass(&self) -> Vec<f64> {
        let share = self.spacing.iter().product::<f64>() / 8.0;
        let mut diag = vec![0.0; self.num_vertices()];
        for cz in 0..self.nz - 1 {
            for cy in 0..self.ny - 1 {
                for cx in 0..self.nx - 1 {
                    for v in self.cell_vertices(cx, cy, cz) {
                        diag[v] += share;
                    }
                }
            }
        }
        diag
    }

    /// Surface mass matrix over the two Robin planes (no boundary elimination).
    pub fn assemble_robin(&self) -> CsrMatrix {
        let local = quad_mass(self.spacing[0], self.spacing[1]);
        let mut triplets = Vec::new();
        for iz in [0, self.nz - 1] {
            for cy in 0..self.ny - 1 {
                for cx in 0..self.nx - 1 {
                    let verts = [
                        self.index(cx, cy, iz),
                        self.index(cx + 1, cy, iz),
                        self.index(cx, cy + 1, iz),
                        self.index(cx + 1, cy + 1, iz),
                    ];
                    for a in 0..4 {
                        for b in 0..4 {
                            triplets.push((verts[a], verts[b], local[a][b]));
                        }
                    }
                }
            }
        }
        CsrMatrix::from_triplets(self.num_vertices(), triplets)
    }

    /// Trilinear interpolation weights of the cell containing `r`: `(vertex, weight)` pairs.
    pub fn interpolation_weights(&self, r: [f64; 3]) -> Result<[(usize, f64); 8]> {
        let o = self.origin();
        let counts = [self.nx, self.ny, self.nz];
        let upper = [self.extents[0], self.extents[1], self.extents[2]];
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for d in 0..3 {
            let slack = 1e-12 * (upper[d] - o[d]);
            if !(r[d] >= o[d] - slack && r[d] <= upper[d] + slack) {
                return Err(Error::OutsideDomain { x: r[0], y: r[1], z: r[2] });
            }
            let t = ((r[d] - o[d]) / self.spacing[d]).max(0.0);
            let c = (t.floor() as usize).min(counts[d] - 2);
            cell[d] = c;
            frac[d] = (t - c as f64).clamp(0.0, 1.0);
        }
        let mut out = [(0usize, 0.0); 8];
        for (a, slot) in out.iter_mut().enumerate() {
            let (ax, ay, az) = local_offsets(a);
            let w = |off: usize, f: f64| if off == 1 { f } else { 1.0 - f };
            *slot = (
                self.index(cell[0] + ax, cell[1] + ay, cell[2] + az),
                w(ax, frac[0]) * w(ay, frac[1]) * w(az, frac[2]),
            );
        }
        Ok(out)
    }

    /// Load vector of a unit point source at `r`: `b_j = u_j(r)`.
    pub fn point_source_vector(&self, r: [f64; 3]) -> Result<Vec<f64>> {
        let mut b = vec![0.0; self.num_vertices()];
        for (n, w) in self.interpolation_weights(r)? {
            b[n] += w;
        }
        Ok(b)
    }

    /// Evaluates a nodal field at `r` by trilinear interpolation.
    pub fn interpolate(&self, field: &[f64], r: [f64; 3]) -> Result<f64> {
        Ok(self.interpolation_weights(r)?.iter().map(|&(n, w)| w * field[n]).sum())
    }
}

/// The three finite-element matrices of the diffusion operator with Dirichlet
/// vertices decoupled.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Stiffness with unit diagonal on Dirichlet vertices.
    pub stiffness: CsrMatrix,
    /// Lumped mass diagonal (strictly positive everywhere).
    pub lumped_mass: Vec<f64>,
    /// Robin surface mass with Dirichlet rows and columns removed.
    pub robin: CsrMatrix,
    pub dirichlet: Vec<bool>,
}

impl FemMatrices {
    pub fn assemble(grid: &Grid) -> Self {
        let dirichlet = grid.dirichlet_mask();
        Self {
            stiffness: grid.assemble_stiffness(),
            lumped_mass: grid.lumped_mass(),
            robin: grid.assemble_robin().eliminate(&dirichlet, 0.0),
            dirichlet,
        }
    }

    /// Zeroes right-hand-side entries on Dirichlet vertices.
    pub fn apply_dirichlet_rhs(&self, b: &mut [f64]) {
        for (bi, &fixed) in b.iter_mut().zip(&self.dirichlet) {
            if fixed {
                *bi = 0.0;
            }
        }
    }

    /// Assembles `K + σ M + σ' R` explicitly.
    pub fn system_matrix(&self, sigma: f64, sigma_prime: f64) -> CsrMatrix {
        let m = CsrMatrix::from_diagonal(&self.lumped_mass);
        CsrMatrix::linear_combination(&[(1.0, &self.stiffness), (sigma, &m), (sigma_prime, &self.robin)])
    }
}
