//! Principal component pursuit for symmetric matrices.
//!
//! Splits `M` into a sparse `S` and a low-rank `L` with `S - L = M` by
//! minimizing `‖L‖_* + γ‖S‖_1` with the alternating-direction method of
//! multipliers on the augmented Lagrangian.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::symmetrize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcpConfig {
    /// Weight on the ℓ1 term. `None` selects `1/√m`.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    /// Keep `L` positive semidefinite inside the iteration rather than only
    /// at exit.
    pub psd_low_rank: bool,
}

impl Default for PcpConfig {
    fn default() -> Self {
        Self { gamma: None, tol: 1e-7, max_iter: 1000, rho: 1.0, psd_low_rank: false }
    }
}

impl PcpConfig {
    pub fn gamma_for(&self, m: usize) -> f64 {
        self.gamma.unwrap_or_else(|| 1.0 / (m.max(1) as f64).sqrt())
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.rho > 0.0) || !(self.gamma_for(m) > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid PCP configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcpResult {
    pub s_hat: DMatrix<f64>,
    pub l_hat: DMatrix<f64>,
    pub iterations: usize,
    /// `‖S − L − M‖_F / max(1, ‖M‖_F)` of the final iterate.
    pub residual: f64,
    /// Frobenius norm of the negative spectrum removed from `L` at exit.
    pub psd_clip: f64,
    pub converged: bool,
}

/// Componentwise `sign(x)·max(|x| − τ, 0)`.
pub fn soft_threshold(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    x.map(|v| shrink(v, tau))
}

fn shrink(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Proximal operator of the nuclear norm for a symmetric argument: the
/// eigenvalue magnitudes are soft-thresholded by `tau`.
pub fn singular_value_threshold(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(x.clone());
    let shrunk = eig.eigenvalues.map(|l| shrink(l, tau));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&shrunk) * v.transpose();
    symmetrize(&mut out);
    out
}

/// Proximal operator of the nuclear norm restricted to positive semidefinite
/// matrices: eigenvalues become `max(λ − tau, 0)`.
pub fn psd_value_threshold(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(x.clone());
    let shrunk = eig.eigenvalues.map(|l| (l - tau).max(0.0));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&shrunk) * v.transpose();
    symmetrize(&mut out);
    out
}

/// Objective `‖L‖_* + γ‖S‖_1` for symmetric `L`.
pub fn pcp_objective(s: &DMatrix<f64>, l: &DMatrix<f64>, gamma: f64) -> f64 {
    let nuclear: f64 = SymmetricEigen::new(l.clone()).eigenvalues.iter().map(|v| v.abs()).sum();
    nuclear + gamma * s.iter().map(|v| v.abs()).sum::<f64>()
}

fn project_psd(l: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(l.clone());
    let clipped: f64 = eig.eigenvalues.iter().filter(|&&v| v < 0.0).map(|v| v * v).sum::<f64>().sqrt();
    let kept = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&kept) * v.transpose();
    symmetrize(&mut out);
    (out, clipped)
}

/// Decomposes `m_in` as `S − L`. On `NoConvergence` the last iterate is still
/// available through [`pcp_decompose_partial`].
pub fn pcp_decompose(m_in: &DMatrix<f64>, config: &PcpConfig) -> Result<PcpResult> {
    let res = pcp_decompose_partial(m_in, config)?;
    if res.converged {
        Ok(res)
    } else {
        Err(Error::NoConvergence { iterations: res.iterations, residual: res.residual })
    }
}

/// Runs the solver and returns the final iterate whether or not it met `tol`.
pub fn pcp_decompose_partial(m_in: &DMatrix<f64>, config: &PcpConfig) -> Result<PcpResult> {
    let n = m_in.nrows();
    config.validate(n)?;
    let gamma = config.gamma_for(n);
    let rho = config.rho;
    let scale = m_in.norm().max(1.0);

    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut dual = DMatrix::<f64>::zeros(n, n);
    let mut residual = m_in.norm() / scale;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=config.max_iter {
        iterations = it;
        let arg = &s - m_in + &dual / rho;
        l = if config.psd_low_rank {
            psd_value_threshold(&arg, 1.0 / rho)
        } else {
            singular_value_threshold(&arg, 1.0 / rho)
        };
        let s_prev = s;
        let target = &l + m_in - &dual / rho;
        s = soft_threshold(&target, gamma / rho);
        let gap = &s - &l - m_in;
        dual += rho * &gap;
        residual = gap.norm() / scale;
        let dual_residual = rho * (&s - &s_prev).norm() / scale;
        if residual <= config.tol && dual_residual <= config.tol {
            converged = true;
            break;
        }
    }

    let (l_hat, psd_clip) = project_psd(&l);
    log::debug!("pcp: {iterations} iterations, residual {residual:e}, psd clip {psd_clip:e}");
    Ok(PcpResult { s_hat: s, l_hat, iterations, residual, psd_clip, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DVector};

    #[test]
    fn soft_threshold_examples() {
        let x = dmatrix![5.0, -1.0; 0.5, -7.0];
        assert_eq!(soft_threshold(&x, 2.0), dmatrix![3.0, 0.0; 0.0, -5.0]);
        assert_eq!(soft_threshold(&x, 0.0), x);
    }

    #[test]
    fn svt_examples() {
        let x = dmatrix![2.0, 1.0; 1.0, 3.0];
        assert!((singular_value_threshold(&x, 0.0) - &x).amax() < 1e-12);

        let u: DVector<f64> = DVector::from_vec(vec![1.0, 2.0, 2.0]) / 3.0;
        let rank1 = 3.0 * &u * u.transpose();
        let shrunk = singular_value_threshold(&rank1, 1.0);
        let expected: DMatrix<f64> = 2.0 * &u * u.transpose();
        assert!((shrunk - expected).amax() < 1e-12);

        let d = singular_value_threshold(&dmatrix![5.0, 0.0; 0.0, 1.0], 2.0);
        assert!((d - dmatrix![3.0, 0.0; 0.0, 0.0]).amax() < 1e-12);
    }

    #[test]
    fn svt_shrinks_negative_eigenvalues_toward_zero() {
        let d = singular_value_threshold(&dmatrix![-5.0, 0.0; 0.0, 1.0], 2.0);
        assert!((d - dmatrix![-3.0, 0.0; 0.0, 0.0]).amax() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_split() {
        let res = pcp_decompose(&DMatrix::zeros(4, 4), &PcpConfig::default()).unwrap();
        assert_eq!(res.s_hat, DMatrix::zeros(4, 4));
        assert_eq!(res.l_hat, DMatrix::zeros(4, 4));
    }

    #[test]
    fn huge_gamma_puts_everything_in_low_rank_part() {
        let z = DVector::from_vec(vec![0.5, -0.3, 0.8, 0.2]);
        let m_in = -(&z * z.transpose()) - 0.1 * DMatrix::<f64>::identity(4, 4);
        let cfg = PcpConfig { gamma: Some(1e6), ..PcpConfig::default() };
        let res = pcp_decompose(&m_in, &cfg).unwrap();
        assert!(res.s_hat.amax() < 1e-6);
        assert!((&res.l_hat + &m_in).amax() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = PcpConfig { tol: 0.0, ..PcpConfig::default() };
        assert!(pcp_decompose(&DMatrix::zeros(2, 2), &cfg).is_err());
        let cfg = PcpConfig { max_iter: 0, ..PcpConfig::default() };
        assert!(pcp_decompose(&DMatrix::zeros(2, 2), &cfg).is_err());
    }

    #[test]
    fn no_convergence_is_reported() {
        let z = DVector::from_vec(vec![0.5, -0.3, 0.8, 0.2]);
        let m_in = DMatrix::<f64>::identity(4, 4) * 2.0 - &z * z.transpose();
        let cfg = PcpConfig { max_iter: 2, ..PcpConfig::default() };
        assert!(matches!(pcp_decompose(&m_in, &cfg), Err(Error::NoConvergence { iterations: 2, .. })));
        let partial = pcp_decompose_partial(&m_in, &cfg).unwrap();
        assert!(!partial.converged);
    }

    #[test]
    fn psd_prox_drops_negative_spectrum() {
        let d = psd_value_threshold(&dmatrix![-5.0, 0.0; 0.0, 4.0], 1.0);
        assert!((d - dmatrix![0.0, 0.0; 0.0, 3.0]).amax() < 1e-12);
        let x = dmatrix![2.0, 1.0; 1.0, 3.0];
        assert!((psd_value_threshold(&x, 0.0) - &x).amax() < 1e-12);
    }

    #[test]
    fn both_low_rank_updates_recover_a_planted_split() {
        let m = 12;
        let z = DVector::from_fn(m, |i, _| if i % 3 == 0 { -1.0 } else { 1.0 }).normalize() * 1.5;
        let mut k = DMatrix::<f64>::identity(m, m) * 2.0;
        for &(i, j) in &[(0, 5), (2, 9), (4, 7)] {
            k[(i, j)] = 0.5;
            k[(j, i)] = 0.5;
        }
        let l = &z * z.transpose();
        for psd_low_rank in [true, false] {
            let cfg = PcpConfig { psd_low_rank, ..PcpConfig::default() };
            let res = pcp_decompose(&(&k - &l), &cfg).unwrap();
            assert!((&res.l_hat - &l).norm() / l.norm() < 1e-2, "psd_low_rank = {psd_low_rank}");
            assert!((&res.s_hat - &k).amax() < 5e-2);
        }
    }
}
