//! Per-batch labeling rates, empirical covariance and its regularized inverse.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoding::EncodedMatrix;
use crate::error::{Error, Result};

/// Default relative ridge used when the covariance is (near) singular.
pub const DEFAULT_EPS_REL: f64 = 1e-6;

/// Condition estimate above which a matrix is treated as singular.
const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    /// Mean encoded vote per source.
    pub nu: DVector<f64>,
    /// Population-normalized covariance of the encoded votes.
    pub sigma_o: DMatrix<f64>,
    pub n: usize,
}

/// Class balance and variance of the scalar `+1/-1` target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub e_y: f64,
    pub sigma_s: f64,
}

impl ClassPrior {
    pub fn new(e_y: f64) -> Result<Self> {
        let sigma_s = 1.0 - e_y * e_y;
        if !(sigma_s > 0.0) {
            return Err(Error::InvalidConfig(format!("class balance E[Y] = {e_y} must lie in (-1, 1)")));
        }
        Ok(Self { e_y, sigma_s })
    }

    /// No prior information: `E[Y] = 0`, `Var[Y] = 1`.
    pub fn uninformative() -> Self {
        Self { e_y: 0.0, sigma_s: 1.0 }
    }

    /// One-vs-rest target for a class with marginal probability `p`.
    pub fn from_class_probability(p: f64) -> Result<Self> {
        Self::new(2.0 * p - 1.0)
    }
}

/// Column means of the encoded votes; abstains contribute zero.
pub fn labeling_rates(encoded: &EncodedMatrix) -> DVector<f64> {
    let q = encoded.values.nrows() as f64;
    encoded.values.row_sum().transpose() / q
}

/// `ΛΛᵀ/n − ννᵀ` over the encoded votes.
pub fn covariance(encoded: &EncodedMatrix) -> Result<MomentEstimates> {
    let q = encoded.values.nrows();
    if q < 2 {
        return Err(Error::DegenerateBatch(q));
    }
    let nu = labeling_rates(encoded);
    let gram = encoded.values.tr_mul(&encoded.values) / q as f64;
    let mut sigma_o = gram - &nu * nu.transpose();
    symmetrize(&mut sigma_o);
    Ok(MomentEstimates { nu, sigma_o, n: q })
}

pub(crate) fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Inverse of `sigma + δI`, where `δ = eps_rel · tr(sigma)/m` is applied only
/// when the smallest eigenvalue falls below it.
pub fn regularized_inverse(sigma: &DMatrix<f64>, eps_rel: f64) -> Result<DMatrix<f64>> {
    let m = sigma.nrows();
    let eig = SymmetricEigen::new(sigma.clone());
    let min_eig = eig.eigenvalues.min();
    let ridge = eps_rel * sigma.trace() / m as f64;
    let delta = if min_eig < ridge { ridge } else { 0.0 };
    let shifted = eig.eigenvalues.map(|l| l + delta);
    let lo = shifted.min();
    let hi = shifted.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::NotInvertible { condition });
    }
    let inv = shifted.map(|l| 1.0 / l);
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&inv) * v.transpose();
    symmetrize(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodedMatrix;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn enc(values: DMatrix<f64>) -> EncodedMatrix {
        EncodedMatrix { values, target_class: 1 }
    }

    fn column(v: &[f64]) -> EncodedMatrix {
        enc(DMatrix::from_column_slice(v.len(), 1, v))
    }

    #[test]
    fn labeling_rate_examples() {
        assert_eq!(labeling_rates(&column(&[1.0, 1.0, 1.0, 1.0]))[0], 1.0);
        assert_eq!(labeling_rates(&column(&[1.0, -1.0, 1.0, -1.0]))[0], 0.0);
        let r = labeling_rates(&column(&[1.0, 0.0, -1.0, 0.0, 1.0, 0.0]))[0];
        assert!((r - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_of_orthogonal_design_is_identity() {
        let m = dmatrix![1.0, 1.0; 1.0, -1.0; -1.0, 1.0; -1.0, -1.0];
        let est = covariance(&enc(m)).unwrap();
        assert_eq!(est.nu, DVector::zeros(2));
        assert!((est.sigma_o - DMatrix::<f64>::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn covariance_of_duplicated_column() {
        let m = dmatrix![1.0, 1.0; -1.0, -1.0; 1.0, 1.0; 1.0, 1.0; -1.0, -1.0];
        let s = covariance(&enc(m)).unwrap().sigma_o;
        assert!((s[(0, 1)] - s[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn constant_column_has_zero_row() {
        let m = dmatrix![1.0, 1.0, 0.0; -1.0, 1.0, 0.0; 1.0, 1.0, 0.0; 1.0, 1.0, 0.0];
        let s = covariance(&enc(m)).unwrap().sigma_o;
        for j in 0..3 {
            assert_eq!(s[(1, j)], 0.0);
            assert_eq!(s[(2, j)], 0.0);
        }
    }

    #[test]
    fn covariance_needs_two_rows() {
        let m = dmatrix![1.0, 1.0, 1.0];
        assert_eq!(covariance(&enc(m)).unwrap_err(), Error::DegenerateBatch(1));
    }

    #[test]
    fn inverse_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((regularized_inverse(&id, 1e-6).unwrap() - &id).norm() < 1e-14);
        let d = regularized_inverse(&dmatrix![2.0, 0.0; 0.0, 4.0], 1e-6).unwrap();
        assert!((d - dmatrix![0.5, 0.0; 0.0, 0.25]).norm() < 1e-14);
    }

    #[test]
    fn inverse_of_rank_deficient_uses_ridge() {
        let a = dmatrix![1.0, 1.0; 1.0, 1.0];
        let inv = regularized_inverse(&a, 1e-6).unwrap();
        // (A + δI)^-1 = [[1+δ, -1], [-1, 1+δ]] / ((1+δ)^2 - 1) with δ = 1e-6 · tr/m = 1e-6
        let d = 1e-6;
        let det = (1.0 + d) * (1.0 + d) - 1.0;
        let expected = dmatrix![1.0 + d, -1.0; -1.0, 1.0 + d] / det;
        assert!(((&inv - &expected).norm() / expected.norm()) < 1e-8);
        assert_eq!(inv[(0, 1)], inv[(1, 0)]);
    }

    #[test]
    fn zero_matrix_is_not_invertible() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert!(matches!(regularized_inverse(&z, 1e-6), Err(Error::NotInvertible { .. })));
    }

    #[test]
    fn prior_constructors() {
        assert_eq!(ClassPrior::uninformative(), ClassPrior::new(0.0).unwrap());
        let p = ClassPrior::from_class_probability(0.25).unwrap();
        assert!((p.e_y + 0.5).abs() < 1e-15 && (p.sigma_s - 0.75).abs() < 1e-15);
        assert!(ClassPrior::new(1.0).is_err());
    }

    /// Two-pass centered covariance, independent of the Gram-matrix route.
    fn two_pass(values: &DMatrix<f64>) -> DMatrix<f64> {
        let (q, m) = values.shape();
        let mean: Vec<f64> = (0..m).map(|j| values.column(j).iter().sum::<f64>() / q as f64).collect();
        DMatrix::from_fn(m, m, |a, b| {
            (0..q).map(|i| (values[(i, a)] - mean[a]) * (values[(i, b)] - mean[b])).sum::<f64>() / q as f64
        })
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = rng.gen_range(2..50);
            let m = rng.gen_range(1..7);
            let values = DMatrix::from_fn(q, m, |_, _| rng.gen_range(-1i32..=1) as f64);
            let est = covariance(&enc(values.clone())).unwrap();
            assert!((est.sigma_o - two_pass(&values)).amax() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(seed in any::<u64>(), q in 2usize..40, m in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = DMatrix::from_fn(q, m, |_, _| rng.gen_range(-1i32..=1) as f64);
            let est = covariance(&enc(values)).unwrap();
            let s = &est.sigma_o;
            prop_assert!((s - s.transpose()).amax() <= 1e-12);
            prop_assert!(s.diagonal().iter().all(|&d| d >= 0.0));
            prop_assert!(est.nu.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            let eig = SymmetricEigen::new(s.clone());
            prop_assert!(eig.eigenvalues.min() >= -1e-10);
        }

        #[test]
        fn inverse_times_shifted_is_identity(seed in any::<u64>(), m in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::<f64>::identity(m, m);
            let inv = regularized_inverse(&a, DEFAULT_EPS_REL).unwrap();
            let err = (&inv * &a - DMatrix::<f64>::identity(m, m)).norm();
            prop_assert!(err <= 1e-8);
        }
    }
}
