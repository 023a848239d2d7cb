//! Orthonormal bases, principal angles and the Projection Kernel.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor_io::WeightRef;

/// Relative threshold on singular values below which a column is treated as dependent.
pub const RANK_TOL: f64 = 1e-10;

/// An m-dimensional subspace of R^d held as a d x m orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wraps a basis that is already orthonormal; checked to 1e-10.
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let m = basis.ncols();
        if m == 0 || m > basis.nrows() {
            return Err(Error::InvalidArgument(format!(
                "subspace dimension {m} in R^{}",
                basis.nrows()
            )));
        }
        let err = (basis.transpose() * &basis - DMatrix::identity(m, m)).amax();
        if err > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "basis is not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Subspace { basis })
    }

    pub(crate) fn from_orthonormal_unchecked(basis: DMatrix<f64>) -> Self {
        Subspace { basis }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn into_basis(self) -> DMatrix<f64> {
        self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Orthogonal projector U Uᵀ (d x d).
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }
}

/// Number of singular values above `RANK_TOL` times the largest.
pub fn numerical_rank(singular_values: &[f64]) -> usize {
    let max = singular_values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > RANK_TOL * max).count()
}

pub fn orthonormalize(w: &DMatrix<f64>) -> Result<Subspace> {
    orthonormalize_weight(w, None)
}

/// As [`orthonormalize`], naming `weight` in the rank-deficiency error.
pub fn orthonormalize_weight(w: &DMatrix<f64>, weight: Option<WeightRef>) -> Result<Subspace> {
    let (d, m) = w.shape();
    if m == 0 || m > d {
        return Err(Error::InvalidArgument(format!(
            "cannot orthonormalize {d}x{m} matrix"
        )));
    }
    let svd = w.clone().svd(true, false);
    let rank = numerical_rank(svd.singular_values.as_slice());
    if rank < m {
        return Err(Error::RankDeficient {
            rank,
            expected: m,
            weight,
        });
    }
    let basis = svd.u.expect("left singular vectors requested");
    Ok(Subspace { basis })
}

/// Cosines of the principal angles, nonincreasing, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalAngleSpectrum {
    pub cosines: Vec<f64>,
}

impl PrincipalAngleSpectrum {
    pub fn angles(&self) -> Vec<f64> {
        self.cosines.iter().map(|c| c.acos()).collect()
    }

    /// Sum of squared cosines.
    pub fn projection_kernel(&self) -> f64 {
        self.cosines.iter().map(|c| c * c).sum()
    }
}

fn check_pair(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.dim() != b.dim() || a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch(format!(
            "subspaces {}x{} and {}x{}",
            a.ambient_dim(),
            a.dim(),
            b.ambient_dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Principal-angle cosines from an m x m cross-Gram matrix AᵀB.
pub fn cosines_from_cross_gram(cross: DMatrix<f64>) -> Vec<f64> {
    let mut cosines: Vec<f64> = cross
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    cosines
}

pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<PrincipalAngleSpectrum> {
    check_pair(a, b)?;
    Ok(PrincipalAngleSpectrum {
        cosines: cosines_from_cross_gram(a.basis.transpose() * &b.basis),
    })
}

/// PK = Σ cos²θ_i, in [0, m].
pub fn projection_kernel(a: &Subspace, b: &Subspace) -> Result<f64> {
    Ok(principal_angles(a, b)?.projection_kernel())
}

/// PK as tr(P_A P_B) with both projectors materialized. Quadratic in d; for checking.
pub fn projection_kernel_trace(a: &Subspace, b: &Subspace) -> Result<f64> {
    check_pair(a, b)?;
    let pa = a.projector();
    let pb = b.projector();
    // tr(P_A P_B) = <P_A, P_B>_F since both are symmetric.
    Ok(pa.dot(&pb))
}

pub fn normalized_pk(a: &Subspace, b: &Subspace) -> Result<f64> {
    Ok(projection_kernel(a, b)? / a.dim() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn span(d: usize, cols: &[DVector<f64>]) -> Subspace {
        let s = orthonormalize(&DMatrix::from_columns(cols)).unwrap();
        assert_eq!(s.ambient_dim(), d);
        s
    }

    fn e(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    #[test]
    fn scaled_identity_columns() {
        let w = DMatrix::<f64>::identity(5, 3) * 2.0;
        let s = orthonormalize(&w).unwrap();
        // Same span as e1..e3, so projector is diag(1,1,1,0,0).
        let p = s.projector();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1., 1., 1., 0., 0.]));
        assert!((p - expected).amax() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let w = DMatrix::from_columns(&[c.clone(), e(4, 0), c]);
        match orthonormalize(&w) {
            Err(Error::RankDeficient { rank, expected, .. }) => {
                assert_eq!((rank, expected), (2, 3));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn r3_example() {
        let s2 = std::f64::consts::FRAC_1_SQRT_2;
        let a = span(3, &[e(3, 0), e(3, 1)]);
        let b = span(3, &[e(3, 0), (e(3, 1) + e(3, 2)) * s2]);
        let pa = principal_angles(&a, &b).unwrap();
        assert!((pa.cosines[0] - 1.0).abs() < 1e-12);
        assert!((pa.cosines[1] - s2).abs() < 1e-12);
        assert!((projection_kernel(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        assert!((projection_kernel_trace(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        assert!((normalized_pk(&a, &b).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn identical_and_orthogonal() {
        let a = span(3, &[e(3, 0), e(3, 1)]);
        let pa = principal_angles(&a, &a).unwrap();
        assert_eq!(pa.cosines.len(), 2);
        assert!(pa.cosines.iter().all(|c| (c - 1.0).abs() < 1e-12));
        let x = span(3, &[e(3, 0)]);
        let y = span(3, &[e(3, 1)]);
        assert!(principal_angles(&x, &y).unwrap().cosines[0].abs() < 1e-15);
        assert!(normalized_pk(&x, &y).unwrap() < 1e-30);
    }

    #[test]
    fn dimension_mismatch() {
        let a = span(3, &[e(3, 0), e(3, 1)]);
        let b = span(3, &[e(3, 2)]);
        assert!(matches!(projection_kernel(&a, &b), Err(Error::DimensionMismatch(_))));
        assert!(matches!(
            projection_kernel_trace(&a, &b),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn from_orthonormal_checks() {
        assert!(Subspace::from_orthonormal(DMatrix::identity(4, 2)).is_ok());
        assert!(Subspace::from_orthonormal(DMatrix::identity(4, 2) * 2.0).is_err());
    }
}
