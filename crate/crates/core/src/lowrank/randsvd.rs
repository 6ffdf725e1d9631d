//! Adaptive randomized SVD and pairwise agglomeration.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{LinearOperator, LowRankFactor, Method};
use crate::linalg::{frobenius_rank, thin_qr};
use crate::{Error, Result};

/// Share of the tolerance given to the range-finder probe; the rest goes to the
/// exact truncation of the projected matrix.
const RANGE_SHARE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct RandSvdOptions {
    /// Relative Frobenius tolerance.
    pub tol: f64,
    pub oversample: usize,
    /// Columns of the independent error probe.
    pub probes: usize,
    pub initial_rank: usize,
}

impl Default for RandSvdOptions {
    fn default() -> Self {
        Self { tol: 1e-6, oversample: 20, probes: 10, initial_rank: 1 }
    }
}

impl RandSvdOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// SVD with singular triplets in descending order: `(U, s, V)` with `A = U diag(s) Vᵀ`.
pub(crate) fn sorted_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return (DMatrix::zeros(a.nrows(), 0), Vec::new(), DMatrix::zeros(a.ncols(), 0));
    }
    let svd = a.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].partial_cmp(&svd.singular_values[x]).unwrap());
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let uo = DMatrix::from_fn(a.nrows(), k, |r, c| u[(r, order[c])]);
    let vo = DMatrix::from_fn(a.ncols(), k, |r, c| vt[(order[c], r)]);
    (uo, s, vo)
}

/// Approximate flop count of a dense SVD of an `m × n` matrix.
fn svd_flops(m: usize, n: usize) -> u64 {
    let (big, small) = (m.max(n) as u64, m.min(n) as u64);
    4 * big * small * small + 22 * small * small * small
}

/// Randomized SVD with rank doubling.
///
/// Each pass tops the sample up to `r + p` directions, keeps the leading `r`
/// left singular vectors of the sample and accepts when an independent Gaussian probe shows
/// `‖(I − QQᵀ)AΩ₂‖_F ≤ ¼ tol ‖AΩ₂‖_F`; otherwise `r` doubles. The projected
/// matrix `QᵀA` is then truncated exactly. Returns the factor (`U` with
/// orthonormal columns, singular values folded into `V`) and the flops spent.
pub fn randsvd<A: LinearOperator + ?Sized>(op: &A, opts: &RandSvdOptions, rng: &mut impl Rng) -> (LowRankFactor, u64) {
    let (m, n) = (op.nrows(), op.ncols());
    let full = m.min(n);
    let mut flops = 0u64;
    let mut factor = LowRankFactor::zero(m, n, opts.tol, Method::RandSvd);
    if full == 0 {
        return (factor, 0);
    }
    let mut r = opts.initial_rank.clamp(1, full);
    // Samples are kept across rank doublings; only the new columns are drawn.
    let mut y = DMatrix::zeros(m, 0);
    let (q, full_rank) = loop {
        let l = (r + opts.oversample).min(n);
        if l > y.ncols() {
            let fresh = op.matmat(&gaussian(n, l - y.ncols(), rng));
            flops += fresh.ncols() as u64 * op.matvec_flops();
            let old = y.ncols();
            y = y.resize_horizontally(l, 0.0);
            y.columns_mut(old, l - old).copy_from(&fresh);
        }
        let (uy, _, _) = sorted_svd(&y);
        flops += svd_flops(m, l);
        let q = uy.columns(0, r.min(uy.ncols())).into_owned();

        let z = op.matmat(&gaussian(n, opts.probes, rng));
        flops += opts.probes as u64 * op.matvec_flops();
        let znorm = z.norm();
        if znorm == 0.0 {
            return (factor, flops);
        }
        let resid = &z - &q * q.tr_mul(&z);
        flops += 4 * (m * q.ncols() * opts.probes) as u64;
        let est = resid.norm() / znorm;
        if est <= RANGE_SHARE * opts.tol {
            break (q, false);
        }
        if r >= full {
            break (q, true);
        }
        r = (2 * r).min(full);
    };
    let bt = op.rmatmat(&q);
    flops += q.ncols() as u64 * op.matvec_flops();
    // B = Qᵀ A = X S Wᵀ where Bᵀ = W S Xᵀ.
    let (w, s, x) = sorted_svd(&bt);
    flops += svd_flops(n, q.ncols());
    let bnorm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let trunc = (1.0 - RANGE_SHARE * RANGE_SHARE).sqrt() * opts.tol * bnorm;
    let keep = frobenius_rank(&s, trunc);
    let u = &q * x.columns(0, keep);
    let mut v = w.columns(0, keep).into_owned();
    for (c, sv) in s.iter().take(keep).enumerate() {
        v.column_mut(c).scale_mut(*sv);
    }
    flops += 2 * (m * q.ncols() * keep) as u64;
    factor.u = u;
    factor.v = v;
    factor.full_rank = full_rank;
    (factor, flops)
}

/// Merges the factors of two vertically stacked blocks `[H₁; H₂]`.
///
/// Both left factors are orthonormalised, the stacked right factors
/// `[V₁ᵀ; V₂ᵀ]` are recompressed with [`randsvd`] at `opts.tol`, and the new left
/// factor is `blkdiag(Q₁, Q₂) U_V`. The added error is at most
/// `tol ‖[Ĥ₁; Ĥ₂]‖_F`.
pub fn agglomerate(f1: &LowRankFactor, f2: &LowRankFactor, opts: &RandSvdOptions, rng: &mut impl Rng) -> Result<(LowRankFactor, u64)> {
    if f1.cols() != f2.cols() {
        return Err(Error::DimensionMismatch { expected: f1.cols(), got: f2.cols() });
    }
    let (m1, m2, n) = (f1.rows(), f2.rows(), f1.cols());
    let mut flops = 0u64;
    let mut orth = |f: &LowRankFactor| {
        let (q, r) = thin_qr(&f.u);
        flops += 4 * (f.rows() * f.rank() * f.rank()) as u64 + 2 * (n * f.rank() * q.ncols()) as u64;
        let v = &f.v * r.transpose();
        (q, v)
    };
    let (q1, v1) = orth(f1);
    let (q2, v2) = orth(f2);
    let (k1, k2) = (v1.ncols(), v2.ncols());
    let mut out = LowRankFactor::zero(m1 + m2, n, opts.tol, Method::Recursive);
    if k1 + k2 == 0 {
        return Ok((out, flops));
    }
    let mut stacked = DMatrix::zeros(k1 + k2, n);
    stacked.rows_mut(0, k1).copy_from(&v1.transpose());
    stacked.rows_mut(k1, k2).copy_from(&v2.transpose());
    // The stacked rank is at least that of either child.
    let inner_opts = RandSvdOptions { initial_rank: opts.initial_rank.max(k1).max(k2), ..opts.clone() };
    let (inner, f) = randsvd(&stacked, &inner_opts, rng);
    flops += f;
    let r = inner.rank();
    let mut u = DMatrix::zeros(m1 + m2, r);
    u.rows_mut(0, m1).copy_from(&(&q1 * inner.u.rows(0, k1)));
    u.rows_mut(m1, m2).copy_from(&(&q2 * inner.u.rows(k1, k2)));
    flops += 2 * ((m1 * k1 + m2 * k2) * r) as u64;
    out.u = u;
    out.v = inner.v;
    out.full_rank = inner.full_rank;
    Ok((out, flops))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{gaussian, with_spectrum};
    use super::*;
    use crate::linalg::spectral_norm;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sorted_svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(7, 4, &mut rng);
        let (u, s, v) = sorted_svd(&a);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s));
        assert!((u * d * v.transpose() - a).amax() <= 1e-12);
    }

    #[test]
    fn geometric_spectrum_rank_and_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..200).map(|i| 0.5f64.powi(i)).collect();
        let a = with_spectrum(200, 300, &s, &mut rng);
        let tol = 1e-6;
        let (f, _) = randsvd(&a, &RandSvdOptions::with_tol(tol), &mut rng);
        let fro: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dense_rank = frobenius_rank(&s, tol * fro);
        assert!(f.rank().abs_diff(dense_rank) <= 20, "rank {} vs {dense_rank}", f.rank());
        let err = spectral_norm(&(f.to_dense() - &a));
        assert!(err <= 10.0 * tol * s[0], "err {err}");
        assert!((f.u.tr_mul(&f.u) - DMatrix::identity(f.rank(), f.rank())).amax() <= 1e-12);
    }

    #[test]
    fn exact_rank_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(60, 3, &mut rng) * gaussian(3, 45, &mut rng);
        let (f, _) = randsvd(&a, &RandSvdOptions::with_tol(1e-10), &mut rng);
        assert_eq!(f.rank(), 3);
        assert!((f.to_dense() - &a).norm() <= 1e-12 * a.norm());
        let (z, _) = randsvd(&DMatrix::<f64>::zeros(10, 8), &RandSvdOptions::default(), &mut rng);
        assert_eq!(z.rank(), 0);
    }

    #[test]
    fn full_rank_matrix_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(30, 20, &mut rng);
        let (f, _) = randsvd(&a, &RandSvdOptions::with_tol(1e-12), &mut rng);
        assert_eq!(f.rank(), 20);
        assert!((f.to_dense() - &a).norm() <= 1e-11 * a.norm());
    }

    #[test]
    fn deterministic_under_seed() {
        let mut r0 = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian(40, 3, &mut r0) * gaussian(3, 30, &mut r0);
        let run = |seed| randsvd(&a, &RandSvdOptions::with_tol(1e-8), &mut ChaCha8Rng::seed_from_u64(seed)).0;
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn agglomerate_duplicate_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opts = RandSvdOptions::with_tol(1e-10);
        let h = gaussian(20, 4, &mut rng) * gaussian(4, 50, &mut rng);
        let (f, _) = randsvd(&h, &opts, &mut rng);
        let (g, _) = agglomerate(&f, &f, &opts, &mut rng).unwrap();
        assert_eq!(g.rank(), 4);
        // Row spaces spanned by disjoint coordinate sets are orthogonal.
        let h1 = gaussian(15, 3, &mut rng) * DMatrix::from_fn(3, 50, |i, j| if j % 10 == i { 1.0 + j as f64 } else { 0.0 });
        let h2 = gaussian(15, 2, &mut rng) * DMatrix::from_fn(2, 50, |i, j| if j % 10 == 5 + i { 1.0 } else { 0.0 });
        let (f1, _) = randsvd(&h1, &opts, &mut rng);
        let (f2, _) = randsvd(&h2, &opts, &mut rng);
        let (g, _) = agglomerate(&f1, &f2, &opts, &mut rng).unwrap();
        assert_eq!(g.rank(), 5);
        let bad = LowRankFactor::zero(3, 7, 0.0, Method::Svd);
        assert!(agglomerate(&f1, &bad, &opts, &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn agglomeration_error_bound(seed in 0u64..10_000, r1 in 1usize..8, r2 in 1usize..8, decay in 0.3f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let s1: Vec<f64> = (0..20).map(|i| decay.powi(i as i32) * (1 + r1) as f64).collect();
            let s2: Vec<f64> = (0..20).map(|i| decay.powi(i as i32 + r2 as i32)).collect();
            let h1 = with_spectrum(25, n, &s1, &mut rng);
            let h2 = with_spectrum(30, n, &s2, &mut rng);
            let eps = 1e-4;
            let opts = RandSvdOptions::with_tol(eps);
            let (f1, _) = randsvd(&h1, &opts, &mut rng);
            let (f2, _) = randsvd(&h2, &opts, &mut rng);
            let (g, _) = agglomerate(&f1, &f2, &opts, &mut rng).unwrap();
            let mut h = DMatrix::zeros(55, n);
            h.rows_mut(0, 25).copy_from(&h1);
            h.rows_mut(25, 30).copy_from(&h2);
            let err = (g.to_dense() - &h).norm();
            let bound = (2.0 * eps + eps * eps) * (h1.norm() + h2.norm());
            prop_assert!(err <= bound, "err {} bound {}", err, bound);
            prop_assert!(g.rank() <= f1.rank() + f2.rank());
        }
    }
}
