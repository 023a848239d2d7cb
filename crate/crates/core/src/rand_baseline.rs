//! The random-subspace null model for PK.
//!
//! All sampling uses `ChaCha8Rng`. A run seeded with `seed` gives pair `i`
//! its own stream (`seed_from_u64(seed)` then `set_stream(i)`), so results do
//! not depend on thread count or scheduling.

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::{projection_kernel, Subspace};

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Uniform (Haar) sample from the Stiefel manifold V_m(R^d): a Gaussian matrix
/// orthonormalized column by column, i.e. QR with diag(R) made positive.
pub fn sample_stiefel_with<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Result<Subspace> {
    if m == 0 || m > d {
        return Err(Error::InvalidArgument(format!("cannot sample {m} frames in R^{d}")));
    }
    let qr = gaussian_matrix(d, m, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(Subspace::from_orthonormal_unchecked(q))
}

pub fn sample_stiefel(d: usize, m: usize, seed: u64) -> Result<Subspace> {
    sample_stiefel_with(d, m, &mut rng_for(seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Tight,
    Loose,
}

/// Gaussian approximation to PK between independent uniform m-subspaces of R^d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkReferenceDistribution {
    pub mean: f64,
    pub variance: f64,
    pub kind: ReferenceKind,
}

fn check_dims(d: usize, m: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("reference needs d >= 2, got {d}")));
    }
    if m == 0 || m > d {
        return Err(Error::InvalidArgument(format!("subspace dimension {m} in R^{d}")));
    }
    Ok(())
}

/// N(m²/d, 2m²(d−m)² / (d²(d−1)(d+2))).
pub fn tight_reference(d: usize, m: usize) -> Result<PkReferenceDistribution> {
    check_dims(d, m)?;
    let (d, m) = (d as f64, m as f64);
    Ok(PkReferenceDistribution {
        mean: m * m / d,
        variance: 2.0 * m * m * (d - m).powi(2) / (d * d * (d - 1.0) * (d + 2.0)),
        kind: ReferenceKind::Tight,
    })
}

/// N(m²/d, 2m²/d²); only accurate for m ≪ d.
pub fn loose_reference(d: usize, m: usize) -> Result<PkReferenceDistribution> {
    check_dims(d, m)?;
    let (d, m) = (d as f64, m as f64);
    Ok(PkReferenceDistribution {
        mean: m * m / d,
        variance: 2.0 * m * m / (d * d),
        kind: ReferenceKind::Loose,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Unbiased (n − 1) variance; 0 for a single sample.
    pub variance: f64,
}

impl EmpiricalDistribution {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty sample".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = if samples.len() > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(EmpiricalDistribution {
            samples,
            mean,
            variance,
        })
    }

    pub fn standard_error(&self) -> f64 {
        (self.variance / self.samples.len() as f64).sqrt()
    }
}

/// PK between the column spans of two full-rank Gaussian matrices, without
/// orthonormalizing: with S = GᵀG and C = G_AᵀG_B,
/// tr(P_A P_B) = tr(S_A⁻¹ C S_B⁻¹ Cᵀ).
pub fn pk_from_gaussians(ga: &DMatrix<f64>, gb: &DMatrix<f64>) -> Result<f64> {
    let m = ga.ncols();
    if gb.shape() != ga.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?} Gaussian samples",
            ga.shape(),
            gb.shape()
        )));
    }
    let mut g = DMatrix::zeros(ga.nrows(), 2 * m);
    g.columns_mut(0, m).copy_from(ga);
    g.columns_mut(m, m).copy_from(gb);
    pk_from_stacked(&g, m)
}

/// Same as [`pk_from_gaussians`] for G = [G_A G_B]. One Gram product through
/// the blocked gemm path, which is several times faster than `tr_mul`.
fn pk_from_stacked(g: &DMatrix<f64>, m: usize) -> Result<f64> {
    let s = g.transpose() * g;
    let chol = |block: DMatrix<f64>| {
        Cholesky::new(block).ok_or_else(|| Error::Degenerate("Gaussian sample not full rank".into()))
    };
    let ca = chol(s.view((0, 0), (m, m)).into_owned())?;
    let cb = chol(s.view((m, m), (m, m)).into_owned())?;
    let c = s.view((0, m), (m, m)).into_owned();
    let x = ca.solve(&c); // S_A⁻¹ C
    let y = cb.solve(&c.transpose()); // S_B⁻¹ Cᵀ
    Ok(x.dot(&y.transpose()).clamp(0.0, m as f64))
}

/// `n_pairs` PK values between independent uniform m-subspaces of R^d.
pub fn empirical_pk_distribution(
    d: usize,
    m: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<EmpiricalDistribution> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be positive".into()));
    }
    if m == 0 || m > d {
        return Err(Error::InvalidArgument(format!("subspace dimension {m} in R^{d}")));
    }
    let samples = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i);
            // Column-major fill: the first m columns are G_A, the rest G_B.
            pk_from_stacked(&gaussian_matrix(d, 2 * m, &mut rng), m)
        })
        .collect::<Result<Vec<_>>>()?;
    EmpiricalDistribution::from_samples(samples)
}

/// Same as [`empirical_pk_distribution`] but through explicit Stiefel samples
/// and the SVD form of PK. Slower; used to cross-check the fast path.
pub fn empirical_pk_distribution_explicit(
    d: usize,
    m: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<EmpiricalDistribution> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be positive".into()));
    }
    let samples = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i);
            let a = sample_stiefel_with(d, m, &mut rng)?;
            let b = sample_stiefel_with(d, m, &mut rng)?;
            projection_kernel(&a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    EmpiricalDistribution::from_samples(samples)
}

/// One Monte Carlo estimate against its closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub expected: f64,
}

impl MomentEstimate {
    /// |estimate − expected| in standard errors.
    pub fn z(&self) -> f64 {
        if self.standard_error == 0.0 {
            return if self.estimate == self.expected { 0.0 } else { f64::INFINITY };
        }
        (self.estimate - self.expected).abs() / self.standard_error
    }

    pub fn within(&self, n_se: f64) -> bool {
        self.z() <= n_se
    }
}

/// Entry moments of a Haar orthogonal matrix R.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub d: usize,
    pub n_samples: usize,
    /// E[R_ij²] = 1/d
    pub second: MomentEstimate,
    /// E[R_ij⁴] = 3/(d(d+2))
    pub fourth: MomentEstimate,
    /// Cov(R_ij², R_ij′²) = −2/(d²(d+2))
    pub cov_same_row: MomentEstimate,
    /// Cov(R_ij², R_i′j′²) = 2/(d²(d−1)(d+2))
    pub cov_disjoint: MomentEstimate,
    /// Largest |Σ_i R_ij² − 1| over sampled columns.
    pub max_unit_norm_error: f64,
}

impl MomentReport {
    pub fn estimates(&self) -> [(&'static str, MomentEstimate); 4] {
        [
            ("E[R^2]", self.second),
            ("E[R^4]", self.fourth),
            ("Cov(R_ij^2,R_ij'^2)", self.cov_same_row),
            ("Cov(R_ij^2,R_i'j'^2)", self.cov_disjoint),
        ]
    }

    /// Names of estimates more than `n_se` standard errors from their closed form.
    pub fn flagged(&self, n_se: f64) -> Vec<&'static str> {
        self.estimates()
            .into_iter()
            .filter(|(_, e)| !e.within(n_se))
            .map(|(name, _)| name)
            .collect()
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample covariance of (x, y) and the standard error of that estimate.
fn cov_and_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let (mean, se) = mean_and_se(&prods);
    (mean * n / (n - 1.0), se)
}

/// Each sample draws the first two columns of an independent Haar matrix and
/// records R_00, R_01 and R_11; one value per sample keeps estimates independent.
pub fn moment_oracles(d: usize, n_samples: usize, seed: u64) -> Result<MomentReport> {
    if d < 2 || n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "moment oracles need d >= 2 and n >= 2 (got d={d}, n={n_samples})"
        )));
    }
    let rows: Vec<[f64; 4]> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i);
            let r = sample_stiefel_with(d, 2, &mut rng)?.into_basis();
            let unit = (0..2)
                .map(|j| (r.column(j).norm_squared() - 1.0).abs())
                .fold(0.0, f64::max);
            Ok([r[(0, 0)].powi(2), r[(0, 1)].powi(2), r[(1, 1)].powi(2), unit])
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let y: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let z: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let df = d as f64;
    let est = |(estimate, standard_error): (f64, f64), expected: f64| MomentEstimate {
        estimate,
        standard_error,
        expected,
    };
    Ok(MomentReport {
        d,
        n_samples,
        second: est(mean_and_se(&x), 1.0 / df),
        fourth: est(mean_and_se(&x2), 3.0 / (df * (df + 2.0))),
        cov_same_row: est(cov_and_se(&x, &y), -2.0 / (df * df * (df + 2.0))),
        cov_disjoint: est(
            cov_and_se(&x, &z),
            2.0 / (df * df * (df - 1.0) * (df + 2.0)),
        ),
        max_unit_norm_error: rows.iter().map(|r| r[3]).fold(0.0, f64::max),
    })
}

/// Kolmogorov–Smirnov distance between the entries of Stiefel samples and N(0, 1/d).
pub fn entry_ks_statistic(d: usize, n_entries: usize, seed: u64) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    if n_entries == 0 {
        return Err(Error::InvalidArgument("no entries requested".into()));
    }
    let cols = n_entries.div_ceil(d).min(d);
    let mut entries = Vec::with_capacity(n_entries);
    let mut stream = 0;
    while entries.len() < n_entries {
        let s = sample_stiefel_with(d, cols, &mut rng_for(seed, stream))?;
        stream += 1;
        let need = n_entries - entries.len();
        entries.extend(s.basis().iter().take(need));
    }
    entries.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = entries.len() as f64;
    Ok(entries
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

/// Which argument of KL plays the role of P.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(fitted empirical ‖ reference)
    #[default]
    EmpiricalToReference,
    /// KL(reference ‖ fitted empirical)
    ReferenceToEmpirical,
}

/// KL(N(μ_p, σ_p²) ‖ N(μ_q, σ_q²)); arguments are (mean, variance).
pub fn gaussian_kl(p: (f64, f64), q: (f64, f64)) -> Result<f64> {
    let ((mp, vp), (mq, vq)) = (p, q);
    if !(vp > 0.0 && vq > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Gaussian KL needs positive variances, got {vp} and {vq}"
        )));
    }
    let kl = 0.5 * (vq / vp).ln() + (vp + (mp - mq).powi(2)) / (2.0 * vq) - 0.5;
    Ok(kl.max(0.0))
}

pub fn kl_with_direction(
    empirical: (f64, f64),
    reference: (f64, f64),
    direction: KlDirection,
) -> Result<f64> {
    match direction {
        KlDirection::EmpiricalToReference => gaussian_kl(empirical, reference),
        KlDirection::ReferenceToEmpirical => gaussian_kl(reference, empirical),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stiefel_square_is_orthogonal() {
        let q = sample_stiefel(3, 3, 5).unwrap().into_basis();
        assert!((q.tr_mul(&q) - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(sample_stiefel(3, 4, 0).is_err());
    }

    #[test]
    fn stiefel_is_deterministic() {
        assert_eq!(sample_stiefel(16, 4, 42).unwrap(), sample_stiefel(16, 4, 42).unwrap());
        assert_ne!(sample_stiefel(16, 4, 42).unwrap(), sample_stiefel(16, 4, 43).unwrap());
    }

    #[test]
    fn reference_values() {
        let t = tight_reference(768, 64).unwrap();
        assert!((t.mean - 16.0 / 3.0).abs() < 1e-12);
        let expected = 2.0 * 4096.0 * 704.0f64.powi(2) / (589824.0 * 767.0 * 770.0);
        assert!((t.variance - expected).abs() < 1e-15);
        assert!((t.variance - 0.011656).abs() < 1e-6);
        let l = loose_reference(768, 64).unwrap();
        assert!((l.variance - 8192.0 / 589824.0).abs() < 1e-15);
        let full = tight_reference(10, 10).unwrap();
        assert_eq!((full.mean, full.variance), (10.0, 0.0));
        assert_eq!(loose_reference(10, 10).unwrap().variance, 2.0);
        assert!(tight_reference(1, 1).is_err());
        let (t, l) = (tight_reference(10_000, 4).unwrap(), loose_reference(10_000, 4).unwrap());
        assert!((t.variance / l.variance - 1.0).abs() < 0.01);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl((0.3, 2.0), (0.3, 2.0)).unwrap(), 0.0);
        assert!((gaussian_kl((0.0, 1.0), (1.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let e2 = std::f64::consts::E.powi(2);
        let kl = gaussian_kl((0.0, 1.0), (0.0, e2)).unwrap();
        assert!((kl - (1.0 + 1.0 / (2.0 * e2) - 0.5)).abs() < 1e-12);
        assert!(gaussian_kl((0.0, 0.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn fast_pk_matches_explicit() {
        let fast = empirical_pk_distribution(24, 5, 50, 7).unwrap();
        let slow = empirical_pk_distribution_explicit(24, 5, 50, 7).unwrap();
        for (a, b) in fast.samples.iter().zip(&slow.samples) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(empirical_pk_distribution(8, 2, 0, 0).is_err());
    }

    #[test]
    fn empirical_fit_is_recomputable() {
        let e = EmpiricalDistribution::from_samples(vec![1.0, 2.0, 4.0]).unwrap();
        assert!((e.mean - 7.0 / 3.0).abs() < 1e-15);
        assert!((e.variance - 7.0 / 3.0).abs() < 1e-15);
    }
}
