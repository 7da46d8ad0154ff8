//! Source-accuracy estimation from second moments and its incremental,
//! exponentially-weighted form.
//!
//! The first batch learns the dependency structure by principal component
//! pursuit on `Σ̂_O⁻¹` and reads `|z|` off the low-rank part. Every later batch
//! re-fits `z` against the fixed mask, converts it to `μ̂_b` and folds it into
//! the running estimate with `μ̂ ← (1 − α)μ̂ + αμ̂_b`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{coverage_rates, encode_one_vs_rest, LabelBatch, LabelDomain};
use crate::error::{Error, Result};
use crate::inference::{posterior, PosteriorLabel};
use crate::moments::{covariance, regularized_inverse, ClassPrior, MomentEstimates, DEFAULT_EPS_REL};
use crate::pcp::{pcp_decompose, PcpConfig};
use crate::structure::{
    break_symmetry, break_symmetry_by_component, edges_from_sparse, recover_abs_z, DependencyStructure, ThresholdRule,
    Z_FLOOR,
};

/// Version written into state snapshots; newer files are rejected.
pub const STATE_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub alpha: f64,
    pub pcp: PcpConfig,
    pub threshold: ThresholdRule,
    pub eps_rel: f64,
    pub fit_tol: f64,
    pub fit_max_iter: usize,
    /// Random restarts for a cold-started masked fit.
    pub restarts: usize,
    /// Polish the first-batch `ẑ` from the low-rank component with the
    /// masked fit.
    pub refine_initial: bool,
    /// Class-balance vector; `None` is uniform.
    pub class_balance: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            pcp: PcpConfig::default(),
            threshold: ThresholdRule::default(),
            eps_rel: DEFAULT_EPS_REL,
            fit_tol: 1e-8,
            fit_max_iter: 5000,
            restarts: 5,
            refine_initial: true,
            class_balance: None,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.fit_tol > 0.0) || !(self.pcp.tol > 0.0) || !(self.eps_rel > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.fit_max_iter == 0 || self.pcp.max_iter == 0 || self.restarts == 0 {
            return bad("iteration counts must be positive");
        }
        Ok(())
    }

    pub fn class_balance_for(&self, num_classes: usize) -> Result<Vec<f64>> {
        match &self.class_balance {
            None => Ok(vec![1.0 / num_classes as f64; num_classes]),
            Some(p) => {
                if p.len() != num_classes || p.iter().any(|&x| !(x > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(Error::InvalidConfig(format!(
                        "class balance {p:?} is not a positive probability vector over {num_classes} classes"
                    )));
                }
                Ok(p.clone())
            }
        }
    }
}

/// Result of the masked rank-one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ZFit {
    pub z: DVector<f64>,
    /// `Σ_{(i,j)∈Ω} (k_ij + z_i z_j)²`.
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn masked_terms(k_inv: &DMatrix<f64>, mask: &BTreeSet<(usize, usize)>) -> Vec<(usize, usize, f64)> {
    mask.iter().map(|&(i, j)| (i, j, k_inv[(i, j)])).collect()
}

fn masked_objective(terms: &[(usize, usize, f64)], z: &DVector<f64>) -> f64 {
    terms.iter().map(|&(i, j, k)| (k + z[i] * z[j]).powi(2)).sum()
}

/// Returns `(Jᵀr, JᵀJ)` for the masked residuals `r_p = k_ij + z_i z_j`.
fn normal_equations(terms: &[(usize, usize, f64)], z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = z.len();
    let mut jtr = DVector::zeros(m);
    let mut jtj = DMatrix::zeros(m, m);
    for &(i, j, k) in terms {
        let r = k + z[i] * z[j];
        // ∂r/∂z_i = z_j, ∂r/∂z_j = z_i
        jtr[i] += z[j] * r;
        jtr[j] += z[i] * r;
        jtj[(i, i)] += z[j] * z[j];
        jtj[(j, j)] += z[i] * z[i];
        jtj[(i, j)] += z[i] * z[j];
        jtj[(j, i)] += z[i] * z[j];
    }
    (jtr, jtj)
}

const DIVERGENCE_FACTOR: f64 = 1e3;

/// Minimizes `‖Σ̂_O⁻¹ + zzᵀ‖²_Ω` (Frobenius norm over the masked pairs)
/// starting at `init`. Converged means `‖∇f‖∞ ≤ tol · max(1, max_Ω |k_ij|)^{3/2}`.
///
/// Each iteration takes a Newton step when the exact Hessian is positive
/// definite and a damped Gauss–Newton step otherwise, followed by a
/// backtracking (Armijo) line search. Plain Gauss–Newton only converges
/// linearly here: the masked residuals do not vanish at the optimum on finite
/// samples. A fit whose iterate leaves a generous ball around the data scale
/// is reported as not converged.
pub fn fit_z_masked(
    k_inv: &DMatrix<f64>,
    mask: &BTreeSet<(usize, usize)>,
    init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ZFit> {
    let m = k_inv.nrows();
    if init.len() != m {
        return Err(Error::LengthMismatch { left: init.len(), right: m });
    }
    if mask.len() < m || mask.is_empty() {
        return Err(Error::Underdetermined { masked: mask.len(), sources: m });
    }
    let terms = masked_terms(k_inv, mask);
    // The gradient scales as |k|^{3/2}; measure it against that.
    let k_scale = terms.iter().map(|t| t.2.abs()).fold(1.0f64, f64::max);
    let tol = tol * k_scale.powf(1.5);
    // One entry running off to infinity while the rest shrink means the
    // sample moments admit no finite minimizer; stop early instead of
    // crawling to `max_iter`.
    let z_bound = DIVERGENCE_FACTOR * k_scale.sqrt() * init.amax().max(1.0);
    let mut z = init.clone();
    let mut f = masked_objective(&terms, &z);
    let mut iterations = 0;
    loop {
        let (jtr, jtj) = normal_equations(&terms, &z);
        let grad_norm = 2.0 * jtr.amax();
        if grad_norm <= tol {
            return Ok(ZFit { z, objective: f, grad_norm, iterations });
        }
        if iterations >= max_iter || z.amax() > z_bound {
            return Err(Error::FitNoConvergence { iterations, grad_norm, z: z.iter().copied().collect() });
        }
        iterations += 1;

        let step = newton_step(&terms, &z, &jtj, &jtr).unwrap_or_else(|| damped_step(&jtj, &jtr));
        let slope = 2.0 * jtr.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &z + t * &step;
            let ft = masked_objective(&terms, &trial);
            if ft <= f + 1e-4 * t * slope {
                z = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable descent left; accept if already stationary.
            let (jtr, _) = normal_equations(&terms, &z);
            let grad_norm = 2.0 * jtr.amax();
            if grad_norm <= tol {
                return Ok(ZFit { z, objective: f, grad_norm, iterations });
            }
            return Err(Error::FitNoConvergence { iterations, grad_norm, z: z.iter().copied().collect() });
        }
    }
}

/// Newton direction `−(JᵀJ + Σ r_p ∇²r_p)⁻¹ Jᵀr`, if that Hessian is
/// positive definite.
fn newton_step(
    terms: &[(usize, usize, f64)],
    z: &DVector<f64>,
    jtj: &DMatrix<f64>,
    jtr: &DVector<f64>,
) -> Option<DVector<f64>> {
    let mut h = jtj.clone();
    for &(i, j, k) in terms {
        let r = k + z[i] * z[j];
        h[(i, j)] += r;
        h[(j, i)] += r;
    }
    let step = -h.cholesky()?.solve(jtr);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Solves `(JᵀJ + λI)δ = −Jᵀr`, raising `λ` until the system factors.
fn damped_step(jtj: &DMatrix<f64>, jtr: &DVector<f64>) -> DVector<f64> {
    let m = jtj.nrows();
    let scale = jtj.diagonal().amax().max(1e-12);
    let mut lambda = 1e-10 * scale;
    loop {
        let h = jtj + DMatrix::<f64>::identity(m, m) * lambda;
        if let Some(chol) = h.cholesky() {
            return -chol.solve(jtr);
        }
        lambda *= 10.0;
    }
}

/// Masked fit started at the low-rank estimate, keeping its orientation.
/// An empty low-rank part gets a cold start instead. Falls back to the
/// unrefined vector when the fit does not converge.
fn refine_initial_z(
    k_inv: &DMatrix<f64>,
    structure: &DependencyStructure,
    z: DVector<f64>,
    config: &EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let fit = if z.amax() <= Z_FLOOR {
        log::info!("low-rank part is empty; cold-starting the first-batch fit");
        fit_z_cold(k_inv, &structure.mask, config, rng)
    } else {
        fit_z_masked(k_inv, &structure.mask, &z, config.fit_tol, config.fit_max_iter)
    };
    match fit {
        Ok(mut fit) => {
            if fit.z.dot(&z) < 0.0 {
                fit.z.neg_mut();
            }
            Ok(fit.z)
        }
        Err(Error::FitNoConvergence { grad_norm, .. }) => {
            log::warn!(
                "first-batch refinement did not converge (gradient norm {grad_norm:e}); keeping the low-rank estimate"
            );
            Ok(z)
        }
        Err(e) => Err(e),
    }
}

/// Cold start: `restarts` random unit directions scaled by the square root of
/// the mean masked `|Σ̂_O⁻¹|` entry; the lowest objective wins. The result is
/// oriented so most entries are positive.
pub fn fit_z_cold(
    k_inv: &DMatrix<f64>,
    mask: &BTreeSet<(usize, usize)>,
    config: &EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ZFit> {
    let m = k_inv.nrows();
    let mean_abs = if mask.is_empty() {
        0.0
    } else {
        mask.iter().map(|&(i, j)| k_inv[(i, j)].abs()).sum::<f64>() / mask.len() as f64
    };
    let scale = mean_abs.sqrt().max(Z_FLOOR);
    let mut best: Option<ZFit> = None;
    let mut last_err = None;
    for _ in 0..config.restarts {
        let dir = DVector::<f64>::from_fn(m, |_, _| StandardNormal.sample(rng));
        let init = dir.normalize() * scale;
        match fit_z_masked(k_inv, mask, &init, config.fit_tol, config.fit_max_iter) {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
                    best = Some(fit);
                }
            }
            Err(e @ Error::Underdetermined { .. }) => return Err(e),
            Err(e) => last_err = Some(e),
        }
    }
    let mut fit = best.ok_or_else(|| last_err.expect("at least one restart"))?;
    orient_majority_positive(&mut fit.z);
    Ok(fit)
}

/// Flips `z` globally when most of its entries (ties: its sum) are negative.
pub fn orient_majority_positive(z: &mut DVector<f64>) {
    let pos = z.iter().filter(|&&v| v > Z_FLOOR).count();
    let neg = z.iter().filter(|&&v| v < -Z_FLOOR).count();
    if neg > pos || (neg == pos && z.sum() < 0.0) {
        z.neg_mut();
    }
}

/// `ĉ = (1 + ẑᵀΣ̂_O ẑ) / Σ̂_S`.
pub fn estimate_c(z: &DVector<f64>, sigma_o: &DMatrix<f64>, sigma_s: f64) -> Result<f64> {
    if !(sigma_s > 0.0) {
        return Err(Error::InvalidConfig(format!("class variance {sigma_s} must be positive")));
    }
    let c = (1.0 + (z.transpose() * sigma_o * z)[(0, 0)]) / sigma_s;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::NonPositiveC(c));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyEstimate {
    pub z: DVector<f64>,
    pub c: f64,
    /// `Σ̂_O ẑ / √ĉ`.
    pub sigma_os: DVector<f64>,
    /// `E[λ_i Y]` under the signed encoding, clamped to `[−r_i, r_i]`.
    pub mu: DVector<f64>,
    pub clamped: Vec<bool>,
}

/// `Σ̂_OS = Σ̂_O ẑ/√ĉ` and `μ̂ = Σ̂_OS + Ê[Y]ν`, with `μ̂_i` clamped to the
/// source's coverage.
pub fn estimate_mu(
    sigma_o: &DMatrix<f64>,
    z: &DVector<f64>,
    c: f64,
    prior: &ClassPrior,
    nu: &DVector<f64>,
    coverage: &[f64],
) -> Result<AccuracyEstimate> {
    if !(c > 0.0) {
        return Err(Error::NonPositiveC(c));
    }
    if coverage.len() != z.len() {
        return Err(Error::LengthMismatch { left: coverage.len(), right: z.len() });
    }
    let sigma_os = sigma_o * z / c.sqrt();
    let raw = &sigma_os + nu * prior.e_y;
    let mut clamped = vec![false; z.len()];
    let mu = DVector::from_fn(z.len(), |i, _| {
        let r = coverage[i];
        let v = raw[i].clamp(-r, r);
        clamped[i] = v != raw[i];
        v
    });
    Ok(AccuracyEstimate { z: z.clone(), c, sigma_os, mu, clamped })
}

/// Conditional accuracy `P(λ_i = y | λ_i ≠ 0) = (μ_i + r_i) / (2 r_i)`.
pub fn correlation_to_accuracy(mu: f64, coverage: f64) -> Result<f64> {
    if !(coverage > 0.0) {
        return Err(Error::NoCoverage);
    }
    Ok(((mu + coverage) / (2.0 * coverage)).clamp(0.0, 1.0))
}

/// `(1 − α)·current + α·batch`.
pub fn ewma_update(current: &DVector<f64>, batch: &DVector<f64>, alpha: f64) -> DVector<f64> {
    current * (1.0 - alpha) + batch * alpha
}

/// Running estimate for one one-vs-rest target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassState {
    pub class: usize,
    pub mu: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    domain: LabelDomain,
    pub alpha: f64,
    class_balance: Vec<f64>,
    num_sources: usize,
    structure: Option<DependencyStructure>,
    classes: Vec<ClassState>,
    /// Exponentially-weighted coverage, tracked alongside `μ̂`.
    coverage: DVector<f64>,
    batches_seen: usize,
}

/// Diagnostics for one processed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate {
    pub batch_index: usize,
    pub initial: bool,
    pub per_class: Vec<(usize, AccuracyEstimate)>,
    pub coverage: Vec<f64>,
    pub pcp_iterations: Option<usize>,
    pub sign_ambiguity: bool,
}

impl EstimatorState {
    pub fn new(num_classes: usize, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let domain = LabelDomain::new(num_classes)?;
        Ok(Self {
            domain,
            alpha: config.alpha,
            class_balance: config.class_balance_for(num_classes)?,
            num_sources: 0,
            structure: None,
            classes: Vec::new(),
            coverage: DVector::zeros(0),
            batches_seen: 0,
        })
    }

    pub fn domain(&self) -> LabelDomain {
        self.domain
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn structure(&self) -> Option<&DependencyStructure> {
        self.structure.as_ref()
    }

    pub fn classes(&self) -> &[ClassState] {
        &self.classes
    }

    pub fn coverage(&self) -> &DVector<f64> {
        &self.coverage
    }

    pub fn class_balance(&self) -> &[f64] {
        &self.class_balance
    }

    /// Target classes with their own estimation run: just class 1 when
    /// `k = 2`, every class otherwise.
    pub fn target_classes(&self) -> Vec<usize> {
        let k = self.domain.num_classes();
        if k == 2 {
            vec![1]
        } else {
            (1..=k).collect()
        }
    }

    fn prior_for(&self, class: usize) -> Result<ClassPrior> {
        if self.domain.num_classes() == 2 {
            // Y = +1 for class 1, −1 for class 2.
            ClassPrior::new(self.class_balance[0] - self.class_balance[1])
        } else {
            ClassPrior::from_class_probability(self.class_balance[class - 1])
        }
    }

    /// Runs one batch through the estimator and returns the successor state.
    /// `self` is left untouched, so a failed batch leaves no trace.
    pub fn process_batch(
        &self,
        batch: &LabelBatch,
        config: &EstimatorConfig,
    ) -> Result<(EstimatorState, BatchEstimate)> {
        config.validate()?;
        if batch.domain() != self.domain {
            return Err(Error::IncompatibleState(format!(
                "batch has {} classes, state has {}",
                batch.domain().num_classes(),
                self.domain.num_classes()
            )));
        }
        let m = batch.num_sources();
        if self.batches_seen > 0 && m != self.num_sources {
            return Err(Error::SourceCountMismatch { expected: self.num_sources, got: m });
        }
        let initial = self.structure.is_none();
        let coverage_b = coverage_rates(batch);

        let mut structure = self.structure.clone();
        let mut per_class = Vec::new();
        let mut pcp_iterations = None;
        let mut sign_ambiguity = false;

        for (slot, class) in self.target_classes().into_iter().enumerate() {
            let encoded = encode_one_vs_rest(batch, class)?;
            let moments = covariance(&encoded)?;
            let k_inv = regularized_inverse(&moments.sigma_o, config.eps_rel)?;
            let prior = self.prior_for(class)?;

            let z = if initial {
                let pcp = pcp_decompose(&k_inv, &config.pcp)?;
                pcp_iterations = Some(pcp_iterations.unwrap_or(0) + pcp.iterations);
                if slot == 0 {
                    let floor = config.pcp.tol * k_inv.norm().max(1.0);
                    let t = config.threshold.resolve(&pcp.s_hat, floor);
                    let learned = edges_from_sparse(&pcp.s_hat, t);
                    if learned.mask.len() < m {
                        return Err(Error::Underdetermined { masked: learned.mask.len(), sources: m });
                    }
                    log::info!("learned {} dependency edges at threshold {t:.4}", learned.edges.len());
                    structure = Some(learned);
                }
                let st = structure.as_ref().expect("structure set by the first class");
                let abs_z = recover_abs_z(&pcp.l_hat);
                let z = match break_symmetry(&abs_z, &k_inv, st) {
                    Ok(z) => z,
                    Err(Error::SignAmbiguity { components }) => {
                        log::warn!("sign ambiguity across {} components; orienting each separately", components.len());
                        sign_ambiguity = true;
                        break_symmetry_by_component(&abs_z, &k_inv, st)
                    }
                    Err(e) => return Err(e),
                };
                if config.refine_initial {
                    let mut rng = self.fit_rng(config, class);
                    refine_initial_z(&k_inv, st, z, config, &mut rng)?
                } else {
                    z
                }
            } else {
                let st = structure.as_ref().expect("structure present after the first batch");
                let previous = &self.classes[slot].z;
                self.refit_z(&k_inv, st, previous, config, class)?
            };

            let estimate = self.estimate_from(&moments, &z, &prior, &coverage_b)?;
            per_class.push((class, estimate));
        }

        let mut next = self.clone();
        next.num_sources = m;
        next.structure = structure;
        let coverage_b_vec = DVector::from_vec(coverage_b.clone());
        if initial {
            next.coverage = coverage_b_vec;
            next.classes = per_class
                .iter()
                .map(|(class, est)| ClassState { class: *class, mu: est.mu.clone(), z: est.z.clone() })
                .collect();
        } else {
            next.coverage = ewma_update(&self.coverage, &coverage_b_vec, self.alpha);
            for (state, (_, est)) in next.classes.iter_mut().zip(&per_class) {
                state.mu = ewma_update(&state.mu, &est.mu, self.alpha);
                state.z = est.z.clone();
            }
        }
        next.batches_seen += 1;

        let report = BatchEstimate {
            batch_index: self.batches_seen,
            initial,
            per_class,
            coverage: coverage_b,
            pcp_iterations,
            sign_ambiguity,
        };
        Ok((next, report))
    }

    /// Applies [`process_batch`](Self::process_batch) in place.
    pub fn update(&mut self, batch: &LabelBatch, config: &EstimatorConfig) -> Result<BatchEstimate> {
        let (next, report) = self.process_batch(batch, config)?;
        *self = next;
        Ok(report)
    }

    /// Generator for cold starts, one stream per (batch, class).
    fn fit_rng(&self, config: &EstimatorConfig, class: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream((self.batches_seen * self.domain.num_classes() + class) as u64);
        rng
    }

    fn refit_z(
        &self,
        k_inv: &DMatrix<f64>,
        structure: &DependencyStructure,
        previous: &DVector<f64>,
        config: &EstimatorConfig,
        class: usize,
    ) -> Result<DVector<f64>> {
        if previous.amax() > Z_FLOOR {
            let mut fit = fit_z_masked(k_inv, &structure.mask, previous, config.fit_tol, config.fit_max_iter)?;
            // The fit is sign-symmetric; stay on the orientation fixed by the first batch.
            if fit.z.dot(previous) < 0.0 {
                fit.z.neg_mut();
            }
            Ok(fit.z)
        } else {
            let mut rng = self.fit_rng(config, class);
            Ok(fit_z_cold(k_inv, &structure.mask, config, &mut rng)?.z)
        }
    }

    fn estimate_from(
        &self,
        moments: &MomentEstimates,
        z: &DVector<f64>,
        prior: &ClassPrior,
        coverage: &[f64],
    ) -> Result<AccuracyEstimate> {
        let c = estimate_c(z, &moments.sigma_o, prior.sigma_s)?;
        estimate_mu(&moments.sigma_o, z, c, prior, &moments.nu, coverage)
    }

    /// Per-source conditional accuracies `P(λ_i = y | λ_i ≠ 0)`; `None` for
    /// sources that never vote.
    ///
    /// With more than two classes the per-class one-vs-rest agreements `A_c`
    /// combine exactly as `a = 1 − ½ Σ_c (1 − A_c)`: a wrong vote disagrees on
    /// both the voted and the true class, a correct vote on none.
    pub fn source_accuracies(&self) -> Result<Vec<Option<f64>>> {
        if self.batches_seen == 0 {
            return Err(Error::IncompatibleState("no batch has been processed".into()));
        }
        let binary = self.domain.num_classes() == 2;
        (0..self.num_sources)
            .map(|i| {
                let r = self.coverage[i];
                if !(r > 0.0) {
                    return Ok(None);
                }
                if binary {
                    return correlation_to_accuracy(self.classes[0].mu[i], r).map(Some);
                }
                let mut miss = 0.0;
                for cs in &self.classes {
                    miss += 1.0 - correlation_to_accuracy(cs.mu[i], r)?;
                }
                Ok(Some((1.0 - 0.5 * miss).clamp(0.0, 1.0)))
            })
            .collect()
    }

    pub fn labeler(&self) -> Result<Labeler> {
        let structure =
            self.structure.as_ref().ok_or_else(|| Error::IncompatibleState("no batch has been processed".into()))?;
        Ok(Labeler {
            accuracies: self.source_accuracies()?,
            class_balance: self.class_balance.clone(),
            component_ids: structure.component_ids(),
        })
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let structure = self.structure.as_ref();
        StateSnapshot {
            format_version: STATE_FORMAT_VERSION,
            num_classes: self.domain.num_classes(),
            num_sources: self.num_sources,
            alpha: self.alpha,
            class_balance: self.class_balance.clone(),
            threshold: structure.map(|s| s.threshold),
            edges: structure.map(|s| s.edges.iter().map(|&(i, j)| [i, j]).collect()),
            batches_seen: self.batches_seen,
            coverage: self.coverage.iter().copied().collect(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassSnapshot {
                    class: c.class,
                    mu: c.mu.iter().copied().collect(),
                    z: c.z.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &StateSnapshot) -> Result<Self> {
        let bad = |m: String| Err(Error::IncompatibleState(m));
        if snap.format_version > STATE_FORMAT_VERSION {
            return bad(format!(
                "state format {} is newer than supported version {STATE_FORMAT_VERSION}",
                snap.format_version
            ));
        }
        if !(0.0..=1.0).contains(&snap.alpha) {
            return bad(format!("alpha {} outside [0, 1]", snap.alpha));
        }
        let domain = LabelDomain::new(snap.num_classes)?;
        if snap.class_balance.len() != snap.num_classes {
            return bad("class balance length does not match the class count".into());
        }
        let m = snap.num_sources;
        let structure = match (&snap.edges, snap.threshold) {
            (Some(edges), Some(t)) => {
                if edges.iter().any(|e| e[0] >= m || e[1] >= m) {
                    return bad("edge refers to an unknown source".into());
                }
                Some(DependencyStructure::from_edges(m, edges.iter().map(|e| (e[0], e[1])), t))
            }
            (None, None) => None,
            _ => return bad("edges and threshold must be both present or both absent".into()),
        };
        if structure.is_some() != (snap.batches_seen >= 1) {
            return bad("structure must be present exactly when a batch has been seen".into());
        }
        let state = Self {
            domain,
            alpha: snap.alpha,
            class_balance: snap.class_balance.clone(),
            num_sources: m,
            structure,
            classes: snap
                .classes
                .iter()
                .map(|c| ClassState {
                    class: c.class,
                    mu: DVector::from_vec(c.mu.clone()),
                    z: DVector::from_vec(c.z.clone()),
                })
                .collect(),
            coverage: DVector::from_vec(snap.coverage.clone()),
            batches_seen: snap.batches_seen,
        };
        if state.batches_seen >= 1 {
            let targets = state.target_classes();
            let shapes_ok = state.coverage.len() == m
                && state.classes.len() == targets.len()
                && state.classes.iter().zip(&targets).all(|(c, &t)| c.class == t && c.mu.len() == m && c.z.len() == m);
            if !shapes_ok {
                return bad("per-class vectors do not match the source count".into());
            }
        }
        Ok(state)
    }
}

/// Everything needed to turn votes into posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeler {
    pub accuracies: Vec<Option<f64>>,
    pub class_balance: Vec<f64>,
    pub component_ids: Vec<usize>,
}

impl Labeler {
    pub fn label(&self, votes: &[u32]) -> Result<PosteriorLabel> {
        posterior(votes, &self.accuracies, &self.class_balance, &self.component_ids)
    }

    pub fn label_batch(&self, batch: &LabelBatch) -> Result<Vec<PosteriorLabel>> {
        batch.votes().iter().map(|row| self.label(row)).collect()
    }
}

/// Versioned, flat JSON form of [`EstimatorState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub format_version: u32,
    pub num_classes: usize,
    pub num_sources: usize,
    pub alpha: f64,
    pub class_balance: Vec<f64>,
    pub threshold: Option<f64>,
    pub edges: Option<Vec<[usize; 2]>>,
    pub batches_seen: usize,
    pub coverage: Vec<f64>,
    pub classes: Vec<ClassSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSnapshot {
    pub class: usize,
    pub mu: Vec<f64>,
    pub z: Vec<f64>,
}
