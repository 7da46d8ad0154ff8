//! Synthetic weak-supervision streams with known ground truth.
//!
//! Independent sources abstain with probability `1 − r_i`, otherwise vote the
//! true class with probability `a_i` and a uniformly chosen wrong class
//! otherwise. A dependent child copies its parent's vote verbatim with
//! probability `ρ` and draws independently otherwise. Parents must themselves
//! be independent sources.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_vote, LabelBatch, LabelDomain, ABSTAIN};
use crate::error::{Error, Result};

/// Largest source count accepted by [`brute_force_posterior`].
pub const MAX_ENUMERATION_SOURCES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dependency {
    pub parent: usize,
    pub child: usize,
    pub rho: f64,
}

/// From batch `batch` onwards (zero-based) the sources use `accuracy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub batch: usize,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Class-balance vector, one entry per class.
    pub prior: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub coverage: Vec<f64>,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
    #[serde(default)]
    pub drift: Vec<Drift>,
    /// Examples per batch, used only to place drift points.
    pub batch_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Conditionally independent sources with full coverage and a uniform prior.
    pub fn independent(num_classes: usize, accuracy: Vec<f64>, seed: u64) -> Self {
        let m = accuracy.len();
        Self {
            num_classes,
            prior: vec![1.0 / num_classes as f64; num_classes],
            accuracy,
            coverage: vec![1.0; m],
            dependencies: Vec::new(),
            drift: Vec::new(),
            batch_size: 500,
            seed,
        }
    }

    pub fn num_sources(&self) -> usize {
        self.accuracy.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let m = self.num_sources();
        LabelDomain::new(self.num_classes)?;
        if self.prior.len() != self.num_classes {
            return bad(format!("prior has {} entries for {} classes", self.prior.len(), self.num_classes));
        }
        if self.prior.iter().any(|&p| !(p >= 0.0)) || (self.prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("prior must be a probability vector".into());
        }
        if self.coverage.len() != m {
            return bad(format!("coverage has {} entries for {m} sources", self.coverage.len()));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.accuracy.iter().all(in_unit) || !self.coverage.iter().all(in_unit) {
            return bad("accuracy and coverage must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for d in &self.drift {
            if d.accuracy.len() != m || !d.accuracy.iter().all(in_unit) {
                return bad(format!("drift at batch {} needs {m} accuracies in [0, 1]", d.batch));
            }
        }
        let mut parent_of = vec![None; m];
        for dep in &self.dependencies {
            if dep.parent >= m || dep.child >= m || dep.parent == dep.child || !in_unit(&dep.rho) {
                return bad(format!("invalid dependency {dep:?}"));
            }
            if parent_of[dep.child].replace(dep.parent).is_some() {
                return bad(format!("source {} has more than one parent", dep.child));
            }
        }
        for dep in &self.dependencies {
            if parent_of[dep.parent].is_some() {
                return bad(format!("parent {} is itself a dependent source", dep.parent));
            }
        }
        Ok(())
    }

    /// Accuracies in force during zero-based batch `batch`.
    pub fn accuracy_at(&self, batch: usize) -> &[f64] {
        self.drift
            .iter()
            .filter(|d| d.batch <= batch)
            .max_by_key(|d| d.batch)
            .map_or(&self.accuracy[..], |d| &d.accuracy[..])
    }

    /// `(parent, ρ)` for each source; independent sources get `None`.
    fn copy_links(&self) -> Vec<Option<(usize, f64)>> {
        let mut links = vec![None; self.num_sources()];
        for dep in &self.dependencies {
            links[dep.child] = Some((dep.parent, dep.rho));
        }
        links
    }
}

/// Probability that an independent draw of a source with accuracy `a` and
/// coverage `r` equals `vote` when the true class is `y`.
fn own_vote_probability(vote: u32, y: usize, a: f64, r: f64, k: usize) -> f64 {
    if vote == ABSTAIN {
        1.0 - r
    } else if vote as usize == y {
        r * a
    } else {
        r * (1.0 - a) / (k - 1) as f64
    }
}

fn draw_own_vote(rng: &mut ChaCha8Rng, y: usize, a: f64, r: f64, k: usize) -> u32 {
    if !rng.gen_bool(r) {
        return ABSTAIN;
    }
    if rng.gen_bool(a) {
        return y as u32;
    }
    // Uniform over the k − 1 wrong classes.
    let mut wrong = rng.gen_range(1..k);
    if wrong >= y {
        wrong += 1;
    }
    wrong as u32
}

fn draw_class(rng: &mut ChaCha8Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c + 1;
        }
    }
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
}

/// A generated stream: true classes and the validated vote matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub labels: Vec<u32>,
    pub batch: LabelBatch,
}

/// Samples `n` examples. Deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<SyntheticData> {
    spec.validate()?;
    let (m, k) = (spec.num_sources(), spec.num_classes);
    let links = spec.copy_links();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let acc = spec.accuracy_at(t / spec.batch_size);
        let y = draw_class(&mut rng, &spec.prior);
        let mut row = vec![ABSTAIN; m];
        for i in (0..m).filter(|&i| links[i].is_none()) {
            row[i] = draw_own_vote(&mut rng, y, acc[i], spec.coverage[i], k);
        }
        for i in 0..m {
            if let Some((parent, rho)) = links[i] {
                row[i] = if rng.gen_bool(rho) {
                    row[parent]
                } else {
                    draw_own_vote(&mut rng, y, acc[i], spec.coverage[i], k)
                };
            }
        }
        labels.push(y as u32);
        rows.push(row.into_iter().map(i64::from).collect::<Vec<_>>());
    }
    let batch = if rows.is_empty() {
        LabelBatch::empty(m, LabelDomain::new(k)?)
    } else {
        crate::encoding::validate_batch(&rows, LabelDomain::new(k)?)?
    };
    Ok(SyntheticData { labels, batch })
}

/// Conditional first and second moments of each source's own (non-copied)
/// encoded draw, for true class `y` and target `class`.
fn own_moments(spec: &SyntheticSpec, acc: &[f64], y: usize, class: usize) -> (Vec<f64>, Vec<f64>) {
    let k = spec.num_classes;
    let mut mean = vec![0.0; spec.num_sources()];
    let mut second = vec![0.0; spec.num_sources()];
    for i in 0..spec.num_sources() {
        for v in 0..=k as u32 {
            let p = own_vote_probability(v, y, acc[i], spec.coverage[i], k);
            let e = encode_vote(v, class);
            mean[i] += p * e;
            second[i] += p * e * e;
        }
    }
    (mean, second)
}

fn target(y: usize, class: usize) -> f64 {
    if y == class {
        1.0
    } else {
        -1.0
    }
}

/// Exact `E[o_i Y]` under the one-vs-rest encoding for `class`, at the
/// accuracies in force during zero-based batch `batch`.
pub fn true_mu_at(spec: &SyntheticSpec, class: usize, batch: usize) -> Result<DVector<f64>> {
    spec.validate()?;
    LabelDomain::new(spec.num_classes)?.check_class(class)?;
    let acc = spec.accuracy_at(batch);
    let links = spec.copy_links();
    let mut mu = DVector::zeros(spec.num_sources());
    for y in 1..=spec.num_classes {
        let (own, _) = own_moments(spec, acc, y, class);
        let w = spec.prior[y - 1] * target(y, class);
        for i in 0..spec.num_sources() {
            let cond = match links[i] {
                None => own[i],
                Some((p, rho)) => rho * own[p] + (1.0 - rho) * own[i],
            };
            mu[i] += w * cond;
        }
    }
    Ok(mu)
}

/// [`true_mu_at`] with the initial accuracies.
pub fn true_mu(spec: &SyntheticSpec, class: usize) -> Result<DVector<f64>> {
    true_mu_at(spec, class, 0)
}

/// Exact coverage `P(λ_i ≠ 0)`.
pub fn true_coverage(spec: &SyntheticSpec) -> Vec<f64> {
    let links = spec.copy_links();
    (0..spec.num_sources())
        .map(|i| match links[i] {
            None => spec.coverage[i],
            Some((p, rho)) => rho * spec.coverage[p] + (1.0 - rho) * spec.coverage[i],
        })
        .collect()
}

/// Population labeling rates and covariance of the encoded votes, plus the
/// class prior of the scalar target.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    pub nu: DVector<f64>,
    pub sigma_o: DMatrix<f64>,
    pub e_y: f64,
    /// `Cov(o, Y)`.
    pub sigma_os: DVector<f64>,
}

/// Exact moments of the one-vs-rest encoding for `class` at batch `batch`.
pub fn population_moments(spec: &SyntheticSpec, class: usize, batch: usize) -> Result<PopulationMoments> {
    spec.validate()?;
    LabelDomain::new(spec.num_classes)?.check_class(class)?;
    let m = spec.num_sources();
    let acc = spec.accuracy_at(batch);
    let links = spec.copy_links();
    // Each source is a mixture: with probability ρ_i it equals the own draw
    // of its parent, otherwise its own draw. Own draws are independent given y.
    let parts: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|i| match links[i] {
            None => vec![(i, 1.0)],
            Some((p, rho)) => vec![(p, rho), (i, 1.0 - rho)],
        })
        .collect();

    let mut nu = DVector::zeros(m);
    let mut gram = DMatrix::zeros(m, m);
    let mut e_y = 0.0;
    let mut e_oy = DVector::zeros(m);
    for y in 1..=spec.num_classes {
        let py = spec.prior[y - 1];
        let ty = target(y, class);
        e_y += py * ty;
        let (own, own2) = own_moments(spec, acc, y, class);
        for i in 0..m {
            let mean_i: f64 = parts[i].iter().map(|&(s, w)| w * own[s]).sum();
            nu[i] += py * mean_i;
            e_oy[i] += py * ty * mean_i;
            for j in 0..m {
                let mut cross = 0.0;
                for &(s, wi) in &parts[i] {
                    for &(t, wj) in &parts[j] {
                        let e = if s == t { own2[s] } else { own[s] * own[t] };
                        cross += wi * wj * e;
                    }
                }
                // A source's square is its own second moment, not a cross term.
                if i == j {
                    cross = parts[i].iter().map(|&(s, w)| w * own2[s]).sum();
                }
                gram[(i, j)] += py * cross;
            }
        }
    }
    let sigma_o = gram - &nu * nu.transpose();
    let sigma_os = e_oy - &nu * e_y;
    Ok(PopulationMoments { nu, sigma_o, e_y, sigma_os })
}

/// Exact `p(y | λ)` by enumerating the sampling process: every class and
/// every copy/own outcome of each dependent source.
pub fn brute_force_posterior(spec: &SyntheticSpec, votes: &[u32], batch: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    let m = spec.num_sources();
    if m > MAX_ENUMERATION_SOURCES {
        return Err(Error::TooLarge(m));
    }
    if votes.len() != m {
        return Err(Error::LengthMismatch { left: votes.len(), right: m });
    }
    let k = spec.num_classes;
    let acc = spec.accuracy_at(batch);
    let links = spec.copy_links();
    let children: Vec<usize> = (0..m).filter(|&i| links[i].is_some()).collect();

    let mut joint = vec![0.0; k];
    for y in 1..=k {
        let mut likelihood = 0.0;
        for copy_pattern in 0u32..(1 << children.len()) {
            let mut p = 1.0;
            for i in 0..m {
                p *= match links[i] {
                    None => own_vote_probability(votes[i], y, acc[i], spec.coverage[i], k),
                    Some((parent, rho)) => {
                        let slot = children.iter().position(|&c| c == i).unwrap();
                        if copy_pattern & (1 << slot) != 0 {
                            rho * if votes[i] == votes[parent] { 1.0 } else { 0.0 }
                        } else {
                            (1.0 - rho) * own_vote_probability(votes[i], y, acc[i], spec.coverage[i], k)
                        }
                    }
                };
            }
            likelihood += p;
        }
        joint[y - 1] = spec.prior[y - 1] * likelihood;
    }
    let total: f64 = joint.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidConfig("vote pattern has zero probability under the spec".into()));
    }
    Ok(joint.into_iter().map(|p| p / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec3(acc: Vec<f64>) -> SyntheticSpec {
        SyntheticSpec::independent(2, acc, 7)
    }

    fn partial(mut spec: SyntheticSpec, r: f64) -> SyntheticSpec {
        spec.coverage = vec![r; spec.num_sources()];
        spec
    }

    #[test]
    fn perfect_sources_copy_the_label() {
        let data = generate(&spec3(vec![1.0, 1.0, 1.0]), 200).unwrap();
        for (row, &y) in data.batch.votes().iter().zip(&data.labels) {
            assert!(row.iter().all(|&v| v == y));
        }
    }

    #[test]
    fn zero_coverage_always_abstains() {
        let mut spec = spec3(vec![0.8, 0.7, 0.6]);
        spec.coverage = vec![0.0; 3];
        let data = generate(&spec, 100).unwrap();
        assert!(data.batch.votes().iter().all(|row| row.iter().all(|&v| v == 0)));
    }

    #[test]
    fn empirical_agreement_concentrates() {
        let data = generate(&spec3(vec![0.7, 0.7, 0.7]), 100_000).unwrap();
        let agree = data.batch.votes().iter().zip(&data.labels).filter(|(row, &y)| row[0] == y).count();
        let rate = agree as f64 / 1e5;
        assert!((rate - 0.7).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = spec3(vec![0.8, 0.7, 0.6]);
        assert_eq!(generate(&spec, 300).unwrap(), generate(&spec, 300).unwrap());
    }

    #[test]
    fn zero_examples() {
        let data = generate(&spec3(vec![0.8, 0.7, 0.6]), 0).unwrap();
        assert!(data.labels.is_empty());
        assert_eq!(data.batch.num_examples(), 0);
    }

    #[test]
    fn true_mu_examples() {
        let mu = true_mu(&spec3(vec![0.8, 0.5, 0.8]), 1).unwrap();
        assert!((mu[0] - 0.6).abs() < 1e-15);
        assert!(mu[1].abs() < 1e-15);
        let mut spec = spec3(vec![0.8, 0.8, 0.8]);
        spec.coverage = vec![0.5, 1.0, 1.0];
        assert!((true_mu(&spec, 1).unwrap()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn drift_switches_accuracy() {
        let mut spec = spec3(vec![0.8, 0.7, 0.6]);
        spec.drift = vec![Drift { batch: 50, accuracy: vec![0.4, 0.7, 0.6] }];
        assert_eq!(spec.accuracy_at(49), &[0.8, 0.7, 0.6]);
        assert_eq!(spec.accuracy_at(50), &[0.4, 0.7, 0.6]);
        assert!((true_mu_at(&spec, 1, 60).unwrap()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = spec3(vec![0.8, 0.7, 0.6]);
        spec.dependencies =
            vec![Dependency { parent: 0, child: 1, rho: 0.5 }, Dependency { parent: 1, child: 2, rho: 0.5 }];
        assert!(spec.validate().is_err());
        let mut spec = spec3(vec![0.8, 0.7, 0.6]);
        spec.prior = vec![0.7, 0.7];
        assert!(spec.validate().is_err());
        let mut spec = spec3(vec![0.8, 0.7, 1.2]);
        spec.prior = vec![0.5, 0.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn brute_force_examples() {
        let spec = partial(spec3(vec![0.8, 0.7, 0.6]), 0.9);
        assert_eq!(brute_force_posterior(&spec, &[0, 0, 0], 0).unwrap(), vec![0.5, 0.5]);
        let mut one = spec3(vec![0.8, 0.7, 0.6]);
        one.coverage = vec![1.0, 0.5, 0.5];
        let p = brute_force_posterior(&one, &[1, 0, 0], 0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        let big = SyntheticSpec::independent(2, vec![0.7; 9], 1);
        assert_eq!(brute_force_posterior(&big, &[0; 9], 0).unwrap_err(), Error::TooLarge(9));
    }

    #[test]
    fn perfect_copy_adds_no_information() {
        let mut with_copy = partial(SyntheticSpec::independent(3, vec![0.7, 0.6, 0.8, 0.9], 1), 0.8);
        with_copy.prior = vec![0.5, 0.3, 0.2];
        with_copy.dependencies = vec![Dependency { parent: 0, child: 3, rho: 1.0 }];
        let mut dropped = partial(SyntheticSpec::independent(3, vec![0.7, 0.6, 0.8], 1), 0.8);
        dropped.prior = with_copy.prior.clone();
        for a in 0..=3u32 {
            for b in 0..=3u32 {
                for c in 0..=3u32 {
                    let full = brute_force_posterior(&with_copy, &[a, b, c, a], 0).unwrap();
                    let reduced = brute_force_posterior(&dropped, &[a, b, c], 0).unwrap();
                    for (x, y) in full.iter().zip(&reduced) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_sums_to_one_on_all_patterns() {
        let mut spec = SyntheticSpec::independent(2, vec![0.7, 0.6, 0.8, 0.65, 0.9], 3);
        spec.coverage = vec![0.9, 0.5, 0.7, 0.95, 0.6];
        spec.dependencies = vec![Dependency { parent: 0, child: 4, rho: 0.4 }];
        for code in 0..3usize.pow(5) {
            let votes: Vec<u32> = (0..5).map(|i| ((code / 3usize.pow(i)) % 3) as u32).collect();
            let p = brute_force_posterior(&spec, &votes, 0).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn population_moments_match_sampling() {
        let mut spec = SyntheticSpec::independent(3, vec![0.7, 0.6, 0.8, 0.75], 5);
        spec.coverage = vec![0.9, 0.6, 1.0, 0.8];
        spec.prior = vec![0.5, 0.3, 0.2];
        spec.dependencies = vec![Dependency { parent: 1, child: 3, rho: 0.6 }];
        let n = 200_000;
        let data = generate(&spec, n).unwrap();
        for class in 1..=3 {
            let pop = population_moments(&spec, class, 0).unwrap();
            let enc = crate::encoding::encode_one_vs_rest(&data.batch, class).unwrap();
            let emp = crate::moments::covariance(&enc).unwrap();
            assert!((&emp.nu - &pop.nu).amax() < 0.01);
            assert!((&emp.sigma_o - &pop.sigma_o).amax() < 0.01);
            let mu = true_mu(&spec, class).unwrap();
            assert!((&pop.sigma_os + &pop.nu * pop.e_y - &mu).amax() < 1e-14);
        }
        let cov = true_coverage(&spec);
        assert!((cov[3] - (0.6 * 0.6 + 0.4 * 0.8)).abs() < 1e-15);
    }
}
