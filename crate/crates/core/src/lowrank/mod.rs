//! Low-rank factorisations of the sensitivity operator.
//!
//! Per-source blocks are compressed with randomized SVD or cross approximation,
//! then merged pairwise along a geometric bisection tree of the sources.

mod aca;
mod randsvd;
mod tree;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

pub use aca::{aca_full, aca_partial, AcaResult, BlockAccess};
pub use randsvd::{agglomerate, randsvd, RandSvdOptions};
pub use tree::{build_cluster_tree, recursive_lowrank, tolerance_schedule, ClusterNode, ClusterTree, LeafMethod, LevelInfo, RecursiveOptions, RecursiveResult};

use crate::linalg::{frobenius_rank, thin_qr};
use crate::{Error, Result};

/// Anything that can apply a matrix and its transpose.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn matvec(&self, x: &[f64]) -> Vec<f64>;
    fn rmatvec(&self, y: &[f64]) -> Vec<f64>;

    /// Floating-point operations of one `matvec`.
    fn matvec_flops(&self) -> u64 {
        2 * (self.nrows() * self.ncols()) as u64
    }

    fn matmat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for c in 0..x.ncols() {
            out.column_mut(c).copy_from_slice(&self.matvec(x.column(c).as_slice()));
        }
        out
    }

    fn rmatmat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols(), y.ncols());
        for c in 0..y.ncols() {
            out.column_mut(c).copy_from_slice(&self.rmatvec(y.column(c).as_slice()));
        }
        out
    }
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (self * DVector::from_column_slice(x)).data.into()
    }
    fn rmatvec(&self, y: &[f64]) -> Vec<f64> {
        self.tr_mul(&DVector::from_column_slice(y)).data.into()
    }
    fn matmat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
    fn rmatmat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.tr_mul(y)
    }
}

/// How a factor was produced; stored as a numeric tag in factor files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    RandSvd = 0,
    AcaPartial = 1,
    AcaFull = 2,
    Recursive = 3,
    Svd = 4,
}

impl Method {
    pub fn tag(self) -> u64 {
        self as u64
    }

    pub fn from_tag(tag: u64) -> Result<Self> {
        Ok(match tag {
            0 => Method::RandSvd,
            1 => Method::AcaPartial,
            2 => Method::AcaFull,
            3 => Method::Recursive,
            4 => Method::Svd,
            _ => return Err(Error::Format(format!("unknown method tag {tag}"))),
        })
    }
}

/// `A ≈ U Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactor {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Relative Frobenius tolerance the factor was built for.
    pub tol: f64,
    pub method: Method,
    /// The adaptive search hit the full dimension without meeting the tolerance test.
    pub full_rank: bool,
}

impl LowRankFactor {
    pub fn zero(rows: usize, cols: usize, tol: f64, method: Method) -> Self {
        Self { u: DMatrix::zeros(rows, 0), v: DMatrix::zeros(cols, 0), tol, method, full_rank: false }
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// Reorders rows so that row `perm[i]` of the result is row `i` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut u = DMatrix::zeros(self.u.nrows(), self.u.ncols());
        for (i, &p) in perm.iter().enumerate() {
            u.set_row(p, &self.u.row(i));
        }
        Self { u, ..self.clone() }
    }

    pub fn storage(&self) -> usize {
        self.rank() * (self.rows() + self.cols())
    }
}

/// `U (Vᵀ x)` without forming the product.
pub fn lr_matvec(f: &LowRankFactor, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f.cols() {
        return Err(Error::DimensionMismatch { expected: f.cols(), got: x.len() });
    }
    let t = f.v.tr_mul(&DVector::from_column_slice(x));
    Ok((&f.u * t).data.into())
}

/// `V (Uᵀ y)`.
pub fn lr_rmatvec(f: &LowRankFactor, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != f.rows() {
        return Err(Error::DimensionMismatch { expected: f.rows(), got: y.len() });
    }
    let t = f.u.tr_mul(&DVector::from_column_slice(y));
    Ok((&f.v * t).data.into())
}

impl LinearOperator for LowRankFactor {
    fn nrows(&self) -> usize {
        self.rows()
    }
    fn ncols(&self) -> usize {
        self.cols()
    }
    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        lr_matvec(self, x).expect("dimension checked by caller")
    }
    fn rmatvec(&self, y: &[f64]) -> Vec<f64> {
        lr_rmatvec(self, y).expect("dimension checked by caller")
    }
    fn matvec_flops(&self) -> u64 {
        2 * (self.rank() * (self.rows() + self.cols())) as u64
    }
    fn matmat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.u * self.v.tr_mul(x)
    }
    fn rmatmat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        &self.v * self.u.tr_mul(y)
    }
}

/// Truncation rule for [`recompress`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Discarded Frobenius tail at most this fraction of the factor's norm.
    Relative(f64),
    Rank(usize),
}

/// Re-orthogonalises a factor through thin QRs of both sides and truncates the
/// SVD of the small core. Returns the factor and the flops spent.
pub fn recompress(f: &LowRankFactor, rule: Truncation) -> (LowRankFactor, u64) {
    let r = f.rank();
    if r == 0 {
        return (f.clone(), 0);
    }
    let (m, n) = (f.rows() as u64, f.cols() as u64);
    let (qu, ru) = thin_qr(&f.u);
    let (qv, rv) = thin_qr(&f.v);
    let core = &ru * rv.transpose();
    let svd = core.svd(true, true);
    let (cu, cvt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let keep = match rule {
        Truncation::Relative(tol) => {
            let total = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            frobenius_rank(&s, tol * total)
        }
        Truncation::Rank(k) => k.min(s.len()),
    };
    let mut u = DMatrix::zeros(f.rows(), keep);
    let mut v = DMatrix::zeros(f.cols(), keep);
    for (c, &i) in order.iter().take(keep).enumerate() {
        u.set_column(c, &(&qu * cu.column(i)));
        v.set_column(c, &(&qv * cvt.row(i).transpose() * svd.singular_values[i]));
    }
    let r = r as u64;
    let flops = 4 * r * r * (m + n) + 2 * r * r * r + 22 * r * r * r + 2 * (keep as u64) * r * (m + n);
    let tol = match rule {
        Truncation::Relative(t) => t.max(f.tol),
        Truncation::Rank(_) => f.tol,
    };
    (LowRankFactor { u, v, tol, method: f.method, full_rank: false }, flops)
}

/// Thread-safe flop tally split by the phases of the recursive compression.
#[derive(Debug, Default)]
pub struct FlopCounter {
    leaf: AtomicU64,
    agglomeration: AtomicU64,
    recompression: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopCategory {
    Leaf,
    Agglomeration,
    Recompression,
}

impl FlopCounter {
    pub fn add(&self, cat: FlopCategory, flops: u64) {
        let slot = match cat {
            FlopCategory::Leaf => &self.leaf,
            FlopCategory::Agglomeration => &self.agglomeration,
            FlopCategory::Recompression => &self.recompression,
        };
        slot.fetch_add(flops, Ordering::Relaxed);
    }

    pub fn leaf(&self) -> u64 {
        self.leaf.load(Ordering::Relaxed)
    }

    pub fn agglomeration(&self) -> u64 {
        self.agglomeration.load(Ordering::Relaxed)
    }

    pub fn recompression(&self) -> u64 {
        self.recompression.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.leaf() + self.agglomeration() + self.recompression()
    }
}

/// Writes a factor: little-endian header `M, N, r` (u64), `ε_d` (f64), method tag
/// and permutation length (u64); then the permutation, `U` and `V` row-major.
pub fn write_factor(path: &Path, f: &LowRankFactor, perm: &[usize], eps_d: f64) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in [f.rows() as u64, f.cols() as u64, f.rank() as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&eps_d.to_le_bytes())?;
    w.write_all(&f.method.tag().to_le_bytes())?;
    w.write_all(&(perm.len() as u64).to_le_bytes())?;
    for &p in perm {
        w.write_all(&(p as u64).to_le_bytes())?;
    }
    for m in [&f.u, &f.v] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a factor file; returns the factor (tolerance set to `ε_d`) and the permutation.
pub fn read_factor(path: &Path) -> Result<(LowRankFactor, Vec<usize>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| Error::Format("truncated factor file".into()))
    };
    let (m, n, r) = (
        u64::from_le_bytes(word(0)?) as usize,
        u64::from_le_bytes(word(1)?) as usize,
        u64::from_le_bytes(word(2)?) as usize,
    );
    let eps_d = f64::from_le_bytes(word(3)?);
    let method = Method::from_tag(u64::from_le_bytes(word(4)?))?;
    let plen = u64::from_le_bytes(word(5)?) as usize;
    let expected = 6 + plen + (m + n) * r;
    if bytes.len() != expected * 8 {
        return Err(Error::Format(format!("factor file has {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    let perm = (0..plen).map(|i| Ok(u64::from_le_bytes(word(6 + i)?) as usize)).collect::<Result<Vec<_>>>()?;
    let base = 6 + plen;
    let read_mat = |off: usize, rows: usize| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(rows, r);
        for i in 0..rows {
            for j in 0..r {
                out[(i, j)] = f64::from_le_bytes(word(off + i * r + j)?);
            }
        }
        Ok(out)
    };
    let u = read_mat(base, m)?;
    let v = read_mat(base + m * r, n)?;
    Ok((LowRankFactor { u, v, tol: eps_d, method, full_rank: false }, perm))
}
