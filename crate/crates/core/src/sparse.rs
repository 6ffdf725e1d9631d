//! Compressed-row sparse matrices and a banded Cholesky direct solver.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Square sparse matrix in compressed-row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n × n` matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            assert!(i < n && j < n, "triplet ({i}, {j}) out of bounds for n = {n}");
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over `(col, value)` of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }

    /// Applies the matrix to every column of `x`.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let col = self.mul_vec(x.column(c).as_slice());
            out.column_mut(c).copy_from_slice(&col);
        }
        out
    }

    /// Quadratic form `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn sum_entries(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Returns `D A D` for a diagonal `D`.
    pub fn scale_symmetric(&self, d: &[f64]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in out.row_ptr[i]..out.row_ptr[i + 1] {
                out.values[k] *= d[i] * d[out.col_idx[k]];
            }
        }
        out
    }

    /// Entrywise `Σ c_i A_i` over matrices of equal dimension.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)]) -> Self {
        assert!(!terms.is_empty());
        let n = terms[0].1.n;
        let same_pattern = terms
            .iter()
            .all(|(_, m)| m.n == n && m.row_ptr == terms[0].1.row_ptr && m.col_idx == terms[0].1.col_idx);
        if same_pattern {
            let mut out = terms[0].1.clone();
            for (k, v) in out.values.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (c, m) in terms {
                    acc += c * m.values[k];
                }
                *v = acc;
            }
            return out;
        }
        let mut triplets = Vec::new();
        for (c, m) in terms {
            assert_eq!(m.n, n);
            for i in 0..n {
                for (j, v) in m.row(i) {
                    triplets.push((i, j, c * v));
                }
            }
        }
        Self::from_triplets(n, triplets)
    }

    /// Zeroes rows and columns of the flagged vertices and writes `diag_value` on their diagonal.
    pub fn eliminate(&self, fixed: &[bool], diag_value: f64) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            if fixed[i] {
                if diag_value != 0.0 {
                    triplets.push((i, i, diag_value));
                }
                continue;
            }
            for (j, v) in self.row(i) {
                if !fixed[j] {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(self.n, triplets)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[(i, j)] += v;
            }
        }
        out
    }

    /// Maximum `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }
}

/// Cholesky factor of a symmetric positive definite banded matrix.
///
/// Storage is row-wise over the lower band: `band[i * (w + 1) + (w - (i - j))]`
/// holds `L[i, j]` for `i - w <= j <= i`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    w: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        let w = a.bandwidth();
        let stride = w + 1;
        let mut band = vec![0.0; n * stride];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    band[i * stride + (w - (i - j))] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                // L[i,j] = (A[i,j] - Σ_k L[i,k] L[j,k]) / L[j,j]
                let k0 = j0.max(j.saturating_sub(w));
                let mut s = band[i * stride + (w - (i - j))];
                for k in k0..j {
                    s -= band[i * stride + (w - (i - k))] * band[j * stride + (w - (j - k))];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite);
                    }
                    band[i * stride + w] = s.sqrt();
                } else {
                    band[i * stride + (w - (i - j))] = s / band[j * stride + w];
                }
            }
        }
        Ok(Self { n, w, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(w)..i {
                s -= self.band[i * stride + (w - (i - k))] * y[k];
            }
            y[i] = s / self.band[i * stride + w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n.min(i + w + 1) {
                s -= self.band[k * stride + (w - (k - i))] * y[k];
            }
            y[i] = s / self.band[i * stride + w];
        }
        y
    }
}
