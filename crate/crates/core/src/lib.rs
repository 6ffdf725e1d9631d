//! Hyperspectral diffuse optical tomography toolkit.
//!
//! The crate is organised the way the reconstruction pipeline runs:
//!
//! * [`grid`] discretises a slab phantom with trilinear hexahedra and assembles
//!   the stiffness, mass and Robin surface matrices.
//! * [`optics`] turns chromophore tables and scattering parameters into the
//!   per-wavelength shifts of the diffusion operator.
//! * [`krylov`] solves the whole wavelength family `(K + σ_j M + σ'_j R) x_j = b`
//!   with one shared shift-invariant Arnoldi basis and a recycled deflation
//!   space.
//! * [`born`] builds incident/adjoint fields, Born sensitivity blocks and the
//!   measurement model.
//! * [`lowrank`] compresses the Born operator source by source and agglomerates
//!   the factors along a geometric bisection tree.
//! * [`pals`] reconstructs anomaly shape and chromophore concentrations with a
//!   parametric level set and Levenberg-Marquardt.

pub mod born;
pub mod error;
pub mod grid;
pub mod krylov;
pub mod linalg;
pub mod lowrank;
pub mod optics;
pub mod pals;
pub mod sparse;
pub mod vtk;

pub use error::{Error, Result};
