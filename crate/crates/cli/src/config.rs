//! Flat `key = value` run configuration. Command-line flags are applied on
//! top of the file.

use std::path::Path;

use incws_core::estimator::EstimatorConfig;
use incws_core::harness::{HarnessConfig, ALPHA_GRID, DEFAULT_FOLDS};
use incws_core::structure::ThresholdRule;
use incws_core::synthgen::{Dependency, Drift, SyntheticSpec};

use crate::error::{CliError, CliResult};

pub const DEFAULT_BATCH_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_classes: usize,
    pub harness: HarnessConfig,
    /// Records per batch for `fit-stream`.
    pub batch_size: usize,
    pub folds: usize,
    pub alphas: Vec<f64>,
    pub synth: SynthKeys,
}

/// The `synth.*` keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthKeys {
    pub accuracy: Option<Vec<f64>>,
    pub coverage: Option<Vec<f64>>,
    pub prior: Option<Vec<f64>>,
    pub dependencies: Vec<Dependency>,
    pub drift: Vec<Drift>,
    pub batch_size: Option<usize>,
    pub n: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            harness: HarnessConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            folds: DEFAULT_FOLDS,
            alphas: ALPHA_GRID.to_vec(),
            synth: SynthKeys::default(),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub threshold: Option<String>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub prequential: bool,
}

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Input(format!("config key `{key}`: cannot parse `{value}` as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.trim().parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> CliResult<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

fn list(key: &str, value: &str) -> CliResult<Vec<f64>> {
    value.split(',').map(|v| num(key, v)).collect()
}

/// `auto`, `auto:<fraction>` or an absolute value.
pub fn parse_threshold(value: &str) -> CliResult<ThresholdRule> {
    let v = value.trim();
    if v == "auto" {
        return Ok(ThresholdRule::default());
    }
    if let Some(frac) = v.strip_prefix("auto:") {
        return Ok(ThresholdRule::Relative(num("structure.threshold", frac)?));
    }
    Ok(ThresholdRule::Absolute(num("structure.threshold", v)?))
}

/// `parent:child:rho` entries separated by `;`, zero-based sources.
fn dependencies(key: &str, value: &str) -> CliResult<Vec<Dependency>> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|entry| {
            let parts: Vec<&str> = entry.split(':').collect();
            if parts.len() != 3 {
                return Err(bad(key, entry, "parent:child:rho"));
            }
            Ok(Dependency { parent: num(key, parts[0])?, child: num(key, parts[1])?, rho: num(key, parts[2])? })
        })
        .collect()
}

/// `batch:a1,a2,...` entries separated by `;`, zero-based batches.
fn drifts(key: &str, value: &str) -> CliResult<Vec<Drift>> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|entry| {
            let (batch, acc) = entry.split_once(':').ok_or_else(|| bad(key, entry, "batch:accuracies"))?;
            Ok(Drift { batch: num(key, batch)?, accuracy: list(key, acc)? })
        })
        .collect()
}

impl RunConfig {
    pub fn estimator(&self) -> &EstimatorConfig {
        &self.harness.estimator
    }

    fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let est = &mut self.harness.estimator;
        match key {
            "num_classes" => self.num_classes = num(key, value)?,
            "alpha" => est.alpha = num(key, value)?,
            "seed" => est.seed = num(key, value)?,
            "eps_rel" => est.eps_rel = num(key, value)?,
            "prior" => est.class_balance = Some(list(key, value)?),
            "batch_size" => self.batch_size = num(key, value)?,
            "prequential" => self.harness.prequential = flag(key, value)?,
            "pcp.gamma" => {
                est.pcp.gamma = match value.trim() {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "pcp.tol" => est.pcp.tol = num(key, value)?,
            "pcp.max_iter" => est.pcp.max_iter = num(key, value)?,
            "pcp.rho" => est.pcp.rho = num(key, value)?,
            "pcp.psd_low_rank" => est.pcp.psd_low_rank = flag(key, value)?,
            "structure.threshold" => est.threshold = parse_threshold(value)?,
            "fit.tol" => est.fit_tol = num(key, value)?,
            "fit.max_iter" => est.fit_max_iter = num(key, value)?,
            "fit.restarts" => est.restarts = num(key, value)?,
            "fit.refine_initial" => est.refine_initial = flag(key, value)?,
            "eval.folds" => self.folds = num(key, value)?,
            "eval.batches" => self.harness.num_batches = num(key, value)?,
            "eval.alphas" => self.alphas = list(key, value)?,
            "synth.accuracy" => self.synth.accuracy = Some(list(key, value)?),
            "synth.coverage" => self.synth.coverage = Some(list(key, value)?),
            "synth.prior" => self.synth.prior = Some(list(key, value)?),
            "synth.dependencies" => self.synth.dependencies = dependencies(key, value)?,
            "synth.drift" => self.synth.drift = drifts(key, value)?,
            "synth.batch_size" => self.synth.batch_size = Some(num(key, value)?),
            "synth.n" => self.synth.n = Some(num(key, value)?),
            _ => return Err(CliError::Input(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("config line {}: expected `key = value`", i + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(format!("reading {}", p.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides)?;
        config.estimator().validate()?;
        if config.batch_size == 0 {
            return Err(CliError::Input("batch_size must be positive".into()));
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        let est = &mut self.harness.estimator;
        if let Some(a) = o.alpha {
            est.alpha = a;
        }
        if let Some(g) = o.gamma {
            est.pcp.gamma = Some(g);
        }
        if let Some(t) = &o.threshold {
            est.threshold = parse_threshold(t)?;
        }
        if let Some(s) = o.seed {
            est.seed = s;
        }
        if let Some(b) = o.batch_size {
            self.batch_size = b;
            self.synth.batch_size = Some(b);
        }
        if o.prequential {
            self.harness.prequential = true;
        }
        Ok(())
    }

    /// The generator spec described by the `synth.*` keys.
    pub fn synthetic_spec(&self) -> CliResult<SyntheticSpec> {
        let accuracy =
            self.synth.accuracy.clone().ok_or_else(|| CliError::Input("config needs `synth.accuracy`".into()))?;
        let mut spec = SyntheticSpec::independent(self.num_classes, accuracy, self.estimator().seed);
        if let Some(c) = &self.synth.coverage {
            spec.coverage = c.clone();
        }
        if let Some(p) = &self.synth.prior {
            spec.prior = p.clone();
        }
        spec.dependencies = self.synth.dependencies.clone();
        spec.drift = self.synth.drift.clone();
        spec.batch_size = self.synth.batch_size.unwrap_or(self.batch_size);
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let text = "\
# run
alpha = 0.1
pcp.gamma = 0.4
structure.threshold = auto:0.3   # relative
prior = 0.3, 0.7
synth.accuracy = 0.7,0.8,0.9
synth.dependencies = 0:1:0.5; 0:2:0.25
synth.drift = 50:0.4,0.8,0.9
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.estimator().alpha, 0.1);
        assert_eq!(c.estimator().pcp.gamma, Some(0.4));
        assert_eq!(c.estimator().threshold, ThresholdRule::Relative(0.3));
        assert_eq!(c.estimator().class_balance, Some(vec![0.3, 0.7]));
        assert_eq!(c.synth.dependencies.len(), 2);
        assert_eq!(c.synth.drift[0], Drift { batch: 50, accuracy: vec![0.4, 0.8, 0.9] });
    }

    #[test]
    fn flags_win_over_file() {
        let mut c = RunConfig::parse("alpha = 0.1\nstructure.threshold = 0.2\nbatch_size = 10").unwrap();
        c.apply(&Overrides {
            alpha: Some(0.3),
            threshold: Some("auto".into()),
            batch_size: Some(20),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.estimator().alpha, 0.3);
        assert_eq!(c.estimator().threshold, ThresholdRule::default());
        assert_eq!(c.batch_size, 20);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("alpha 0.1").is_err());
        assert!(RunConfig::parse("alpha = x").is_err());
        assert!(RunConfig::parse("synth.dependencies = 0:1").is_err());
    }
}
