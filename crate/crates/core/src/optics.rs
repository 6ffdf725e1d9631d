//! Wavelength-dependent optical coefficients and the per-wavelength shifts of
//! the diffusion operator.

use crate::{Error, Result};

const BUNDLED_TABLE: &str = include_str!("../data/chromophores.txt");

/// Background concentrations: HbO₂ and HbR in µM, water and lipid as volume fractions.
pub const DEFAULT_BACKGROUND: [f64; 4] = [17.0, 7.0, 0.15, 0.6];
/// Concentrations inside the anomaly, same units as the background.
pub const DEFAULT_ANOMALY: [f64; 4] = [25.0, 15.0, 0.25, 0.5];

/// Scattering and boundary parameters of the diffusion model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalParams {
    /// Scattering prefactor Ψ (1/cm).
    pub psi: f64,
    /// Scattering exponent b.
    pub b: f64,
    /// Reference wavelength λ₀ (nm).
    pub lambda0: f64,
    /// Propagation velocity ν (cm/s).
    pub nu: f64,
    /// Robin coefficient A.
    pub a: f64,
}

impl Default for OpticalParams {
    fn default() -> Self {
        Self { psi: 9.4, b: 1.4, lambda0: 600.0, nu: 2.14e10, a: 1.0 }
    }
}

impl OpticalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0) || !(self.lambda0 > 0.0) || !(self.nu > 0.0) || !(self.a > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "optical parameters must be positive: {self:?}"
            )));
        }
        if !self.b.is_finite() {
            return Err(Error::InvalidArgument("scattering exponent must be finite".into()));
        }
        Ok(())
    }
}

/// Diffusion coefficient `D(λ) = (νΨ/3)(λ/λ₀)^b`.
pub fn diffusion_coefficient(lambda: f64, params: &OpticalParams) -> f64 {
    params.nu * params.psi / 3.0 * (lambda / params.lambda0).powf(params.b)
}

/// Extinction curves sampled on a wavelength grid plus background and anomaly concentrations.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromophoreTable {
    pub species: Vec<String>,
    pub wavelengths: Vec<f64>,
    /// `extinction[i][l]` is species `l` at `wavelengths[i]`.
    pub extinction: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub anomaly: Vec<f64>,
}

impl ChromophoreTable {
    /// The four-species table shipped with the crate.
    pub fn bundled() -> Self {
        let mut t = Self::parse(BUNDLED_TABLE).expect("bundled chromophore table is well formed");
        t.background = DEFAULT_BACKGROUND.to_vec();
        t.anomaly = DEFAULT_ANOMALY.to_vec();
        t
    }

    /// Parses the whitespace-separated text format: `#` comments, one header row
    /// (`wavelength` followed by species names), then one row per sample.
    /// Concentrations default to zero.
    pub fn parse(text: &str) -> Result<Self> {
        let mut species: Option<Vec<String>> = None;
        let mut wavelengths = Vec::new();
        let mut extinction = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| Error::TableParse { line: lineno + 1, msg };
            let Some(names) = &species else {
                if fields.len() < 2 {
                    return Err(err("header needs a wavelength column and at least one species".into()));
                }
                species = Some(fields[1..].iter().map(|s| s.to_string()).collect());
                continue;
            };
            if fields.len() != names.len() + 1 {
                return Err(err(format!("expected {} columns, found {}", names.len() + 1, fields.len())));
            }
            let nums = fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if !(600.0..=1000.0).contains(&nums[0]) {
                return Err(err(format!("wavelength {} outside [600, 1000] nm", nums[0])));
            }
            if wavelengths.last().is_some_and(|&w| nums[0] <= w) {
                return Err(err("wavelengths must be strictly increasing".into()));
            }
            if nums[1..].iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(err("extinction values must be finite and non-negative".into()));
            }
            wavelengths.push(nums[0]);
            extinction.push(nums[1..].to_vec());
        }
        let species = species.ok_or(Error::TableParse { line: 0, msg: "empty table".into() })?;
        if wavelengths.is_empty() {
            return Err(Error::TableParse { line: 0, msg: "no samples".into() });
        }
        let n = species.len();
        Ok(Self { species, wavelengths, extinction, background: vec![0.0; n], anomaly: vec![0.0; n] })
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.wavelengths[0], *self.wavelengths.last().unwrap())
    }

    /// Linearly interpolated extinction of every species at `lambda`.
    pub fn extinction_at(&self, lambda: f64) -> Result<Vec<f64>> {
        let (lo, hi) = self.range();
        if !(lambda >= lo && lambda <= hi) {
            return Err(Error::WavelengthOutOfRange(lambda));
        }
        let i = self.wavelengths.partition_point(|&w| w <= lambda);
        if i == self.wavelengths.len() {
            return Ok(self.extinction[i - 1].clone());
        }
        let (w0, w1) = (self.wavelengths[i - 1], self.wavelengths[i]);
        let t = (lambda - w0) / (w1 - w0);
        Ok(self.extinction[i - 1]
            .iter()
            .zip(&self.extinction[i])
            .map(|(a, b)| a + t * (b - a))
            .collect())
    }

    /// `Σ_l ε_l(λ) c_l` for an arbitrary concentration vector.
    pub fn absorption(&self, lambda: f64, conc: &[f64]) -> Result<f64> {
        if conc.len() != self.num_species() {
            return Err(Error::DimensionMismatch { expected: self.num_species(), got: conc.len() });
        }
        Ok(self.extinction_at(lambda)?.iter().zip(conc).map(|(e, c)| e * c).sum())
    }

    pub fn background_absorption(&self, lambda: f64) -> Result<f64> {
        self.absorption(lambda, &self.background)
    }

    /// Anomaly minus background concentrations: the contrast the Born model sees.
    pub fn contrast(&self) -> Vec<f64> {
        self.anomaly.iter().zip(&self.background).map(|(a, b)| a - b).collect()
    }

    /// Row-per-wavelength extinction matrix `E[j][l] = ε_l(λ_j)`.
    pub fn extinction_matrix(&self, lambdas: &[f64]) -> Result<Vec<Vec<f64>>> {
        lambdas.iter().map(|&l| self.extinction_at(l)).collect()
    }
}

/// Shifts `(σ, σ')` of the operator `K + σ M + σ' R` at wavelength `lambda`:
/// `σ = ν μ_a / D` and `σ' = 1 / (2 A D)`.
pub fn shifts(lambda: f64, table: &ChromophoreTable, params: &OpticalParams) -> Result<(f64, f64)> {
    let d = diffusion_coefficient(lambda, params);
    let mua = table.background_absorption(lambda)?;
    Ok((params.nu * mua / d, 1.0 / (2.0 * params.a * d)))
}

/// Evenly spaced wavelengths over `[lo, hi]`.
pub fn wavelength_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|j| lo + (hi - lo) * j as f64 / (count - 1) as f64).collect(),
    }
}

/// Splits the Robin shifts into their mean and the recentred remainders.
///
/// The mean is folded into the base matrix (`K + σ̄' R`) and the remainders are
/// used as per-shift Robin coefficients; `recombine_shift` recovers the original
/// shift for assembly.
pub fn center_shift_transform(sigma_prime: &[f64]) -> (f64, Vec<f64>) {
    assert!(!sigma_prime.is_empty(), "need at least one shift");
    let mean = sigma_prime.iter().sum::<f64>() / sigma_prime.len() as f64;
    (mean, sigma_prime.iter().map(|s| s - mean).collect())
}

/// `σ̄' + (σ'_j − σ̄')`; exact whenever `σ'_j` lies within a factor two of the mean.
pub fn recombine_shift(center: f64, recentred: f64) -> f64 {
    center + recentred
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_table(value: f64) -> ChromophoreTable {
        ChromophoreTable::parse(&format!("wavelength x\n600 {value}\n1000 {value}\n")).unwrap()
    }

    #[test]
    fn diffusion_at_reference_wavelength() {
        let p = OpticalParams::default();
        assert!((diffusion_coefficient(600.0, &p) - 9.4 * p.nu / 3.0).abs() < 1e-6);
    }

    #[test]
    fn diffusion_at_800_matches_log_space() {
        let p = OpticalParams::default();
        let expect = ((9.4 * p.nu / 3.0).ln() + 1.4 * (800.0f64 / 600.0).ln()).exp();
        let got = diffusion_coefficient(800.0, &p);
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn background_absorption_examples() {
        let mut t = flat_table(1.0);
        assert_eq!(t.background_absorption(700.0).unwrap(), 0.0);
        t.background = vec![17.0];
        assert!((t.background_absorption(733.0).unwrap() - 17.0).abs() < 1e-12);

        let mut t = ChromophoreTable::parse("wavelength a\n600 1.0\n700 3.0\n").unwrap();
        t.background = vec![1.0];
        assert!((t.background_absorption(650.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((t.background_absorption(700.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(t.background_absorption(750.0), Err(Error::WavelengthOutOfRange(_))));
        assert!(t.background_absorption(599.0).is_err());
    }

    #[test]
    fn table_parse_rejects_bad_rows() {
        assert!(ChromophoreTable::parse("wavelength a\n600 -1\n").is_err());
        assert!(ChromophoreTable::parse("wavelength a\n700 1\n650 1\n").is_err());
        assert!(ChromophoreTable::parse("wavelength a\n550 1\n").is_err());
        assert!(ChromophoreTable::parse("wavelength a b\n600 1\n").is_err());
        assert!(ChromophoreTable::parse("# nothing\n").is_err());
    }

    #[test]
    fn bundled_table_is_four_species() {
        let t = ChromophoreTable::bundled();
        assert_eq!(t.species, ["HbO2", "HbR", "H2O", "lipid"]);
        assert_eq!(t.range(), (600.0, 1000.0));
        for lambda in wavelength_grid(600.0, 1000.0, 25) {
            assert!(t.background_absorption(lambda).unwrap() > 0.0);
        }
    }

    #[test]
    fn shifts_match_scalar_recomputation() {
        let t = ChromophoreTable::bundled();
        let p = OpticalParams::default();
        let (s, sp) = shifts(700.0, &t, &p).unwrap();
        // Independent evaluation from the raw row at 700 nm.
        let row = [6.679e-4, 4.132e-3, 6.00e-3, 2.3e-3];
        let mua: f64 = row.iter().zip(DEFAULT_BACKGROUND).map(|(e, c)| e * c).sum();
        let d = 2.14e10 * 9.4 / 3.0 * (700.0f64 / 600.0).powf(1.4);
        assert!((s - 2.14e10 * mua / d).abs() <= 1e-12 * s);
        assert!((sp - 0.5 / d).abs() <= 1e-12 * sp);
        assert!(s > 0.0 && sp > 0.0);
    }

    #[test]
    fn shift_limits() {
        let p = OpticalParams::default();
        let (s, _) = shifts(800.0, &flat_table(1.0), &p).unwrap();
        assert_eq!(s, 0.0);
        let big_a = OpticalParams { a: 1e300, ..p };
        let (_, sp) = shifts(800.0, &flat_table(1.0), &big_a).unwrap();
        assert!(sp < 1e-300);
    }

    #[test]
    fn center_shift_examples() {
        let (c, r) = center_shift_transform(&[1.0, 3.0]);
        assert_eq!(c, 2.0);
        assert_eq!(r, vec![-1.0, 1.0]);
        let (c, r) = center_shift_transform(&[0.7; 5]);
        assert_eq!(c, 0.7);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn diffusion_is_monotone(l1 in 600.0f64..1000.0, l2 in 600.0f64..1000.0, b in 0.1f64..3.0) {
                let p = OpticalParams { b, ..OpticalParams::default() };
                let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
                prop_assert!(diffusion_coefficient(lo, &p) <= diffusion_coefficient(hi, &p));
            }

            #[test]
            fn absorption_is_linear(c1 in prop::collection::vec(0.0f64..50.0, 4),
                                    c2 in prop::collection::vec(0.0f64..50.0, 4),
                                    a in -3.0f64..3.0, lambda in 600.0f64..1000.0) {
                let t = ChromophoreTable::bundled();
                let mix: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + y).collect();
                let lhs = t.absorption(lambda, &mix).unwrap();
                let rhs = a * t.absorption(lambda, &c1).unwrap() + t.absorption(lambda, &c2).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }

            #[test]
            fn recentred_shifts_sum_to_zero_and_recombine_exactly(
                base in 1e-12f64..1.0, rel in prop::collection::vec(0.7f64..1.3, 1..40)) {
                let sp: Vec<f64> = rel.iter().map(|r| base * r).collect();
                let (c, r) = center_shift_transform(&sp);
                let sum: f64 = r.iter().sum();
                prop_assert!(sum.abs() <= 1e-12 * base * sp.len() as f64);
                for (orig, rj) in sp.iter().zip(&r) {
                    prop_assert_eq!(recombine_shift(c, *rj).to_bits(), orig.to_bits());
                }
            }
        }
    }
}
