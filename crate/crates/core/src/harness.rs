//! Evaluation protocol: ordered folds, rotating four-fold test sequences,
//! minibatch partitions, per-batch accuracy, the pooled offline baseline and
//! the α sweep.

use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoding::LabelBatch;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorState, Labeler};

pub const DEFAULT_FOLDS: usize = 5;
/// Folds concatenated into one test sequence.
pub const FOLDS_PER_TEST: usize = 4;
pub const DEFAULT_BATCHES: usize = 100;
/// The α grid of the published sweep.
pub const ALPHA_GRID: [f64; 6] = [0.001, 0.01, 0.025, 0.05, 0.1, 0.25];

/// Fraction of positions where `y_hat` equals `y`.
pub fn accuracy(y: &[u32], y_hat: &[u32]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch { left: y.len(), right: y_hat.len() });
    }
    if y.is_empty() {
        return Err(Error::TooFewExamples { needed: 1, got: 0 });
    }
    let hits = y.iter().zip(y_hat).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y.len() as f64)
}

/// `n` split into `parts` contiguous ranges; the first `n mod parts` ranges
/// are one longer.
fn near_equal_ranges(n: usize, parts: usize, offset: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 {
        return Err(Error::InvalidConfig("partition count must be positive".into()));
    }
    if n < parts {
        return Err(Error::TooFewExamples { needed: parts, got: n });
    }
    let (base, extra) = (n / parts, n % parts);
    let mut start = offset;
    Ok((0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Ordered, unshuffled folds over `0..n`.
pub fn fold_split(n: usize, folds: usize) -> Result<Vec<Range<usize>>> {
    near_equal_ranges(n, folds, 0)
}

/// One-based fold numbers used by test `t`: `t`, `t+1`, … wrapping around,
/// `FOLDS_PER_TEST` in all.
pub fn test_fold_order(num_folds: usize, t: usize) -> Result<Vec<usize>> {
    if t == 0 || t > num_folds {
        return Err(Error::InvalidConfig(format!("test index {t} outside 1..={num_folds}")));
    }
    let take = FOLDS_PER_TEST.min(num_folds);
    Ok((0..take).map(|o| (t - 1 + o) % num_folds + 1).collect())
}

/// The example ranges of test `t`, in order.
pub fn test_sequence(folds: &[Range<usize>], t: usize) -> Result<Vec<Range<usize>>> {
    Ok(test_fold_order(folds.len(), t)?.into_iter().map(|f| folds[f - 1].clone()).collect())
}

/// Positions `0..len` of a sequence split into `num_batches` minibatches.
pub fn minibatch_partition(len: usize, num_batches: usize) -> Result<Vec<Range<usize>>> {
    near_equal_ranges(len, num_batches, 0)
}

/// Votes with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub votes: LabelBatch,
    pub truth: Vec<u32>,
}

impl LabeledData {
    pub fn new(votes: LabelBatch, truth: Vec<u32>) -> Result<Self> {
        if votes.num_examples() != truth.len() {
            return Err(Error::LengthMismatch { left: votes.num_examples(), right: truth.len() });
        }
        let domain = votes.domain();
        for &y in &truth {
            domain.check_class(y as usize)?;
        }
        Ok(Self { votes, truth })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Concatenation of `ranges`, in order.
    pub fn gather(&self, ranges: &[Range<usize>]) -> LabeledData {
        LabeledData {
            votes: self.votes.gather(ranges, 0),
            truth: ranges.iter().flat_map(|r| self.truth[r.clone()].iter().copied()).collect(),
        }
    }

    /// Share of examples on which each source's vote equals the truth;
    /// abstentions count as misses.
    pub fn source_accuracy(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.votes.num_sources())
            .map(|i| {
                let hits = self.votes.votes().iter().zip(&self.truth).filter(|(row, &y)| row[i] == y).count();
                hits as f64 / n
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Incremental,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub estimator: EstimatorConfig,
    pub num_batches: usize,
    /// Label each batch with the state from before its update.
    pub prequential: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { estimator: EstimatorConfig::default(), num_batches: DEFAULT_BATCHES, prequential: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub start: usize,
    pub size: usize,
    /// `None` when no estimate existed to label the batch with.
    pub accuracy: Option<f64>,
    /// Whether the estimator accepted the batch.
    pub updated: bool,
    pub error: Option<String>,
    /// Examples on which every source abstained.
    pub abstained: usize,
    /// Estimated per-source accuracies after the batch.
    pub estimated_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub batches: Vec<BatchRecord>,
    /// Mean of the per-batch accuracies that exist.
    pub mean_accuracy: f64,
    /// Empirical accuracy of each source on the evaluated examples.
    pub per_source_accuracy: Vec<f64>,
    pub baseline_accuracy: Option<f64>,
    pub failed_batches: usize,
    pub config: HarnessConfig,
}

impl EvalReport {
    pub fn per_batch_accuracy(&self) -> Vec<Option<f64>> {
        self.batches.iter().map(|b| b.accuracy).collect()
    }
}

fn label_range(labeler: &Labeler, data: &LabeledData, range: &Range<usize>) -> Result<(f64, usize)> {
    let mut hard = Vec::with_capacity(range.len());
    let mut abstained = 0;
    for row in &data.votes.votes()[range.clone()] {
        let p = labeler.label(row)?;
        abstained += usize::from(p.abstained);
        hard.push(p.hard as u32);
    }
    Ok((accuracy(&data.truth[range.clone()], &hard)?, abstained))
}

fn mean_of(records: &[BatchRecord]) -> Option<f64> {
    let acc: Vec<f64> = records.iter().filter_map(|r| r.accuracy).collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

/// Streams the batches through the estimator in order and labels each one.
///
/// A batch the estimator rejects leaves the state unchanged and is labeled
/// with the state it already has; with no state yet it gets no accuracy.
pub fn run_incremental(data: &LabeledData, config: &HarnessConfig) -> Result<EvalReport> {
    let ranges = minibatch_partition(data.len(), config.num_batches)?;
    let mut state = EstimatorState::new(data.votes.domain().num_classes(), &config.estimator)?;
    let mut batches = Vec::with_capacity(ranges.len());
    let mut first_error = None;
    for (b, range) in ranges.iter().enumerate() {
        let before = match (config.prequential, state.batches_seen()) {
            (true, n) if n > 0 => Some(state.labeler()?),
            _ => None,
        };
        let batch = data.votes.slice(range.clone(), b);
        let error = match state.update(&batch, &config.estimator) {
            Ok(_) => None,
            Err(e) => {
                log::warn!("batch {b} rejected: {e}");
                first_error.get_or_insert(e.clone());
                Some(e.to_string())
            }
        };
        let labeler = if config.prequential {
            before
        } else if state.batches_seen() > 0 {
            Some(state.labeler()?)
        } else {
            None
        };
        let (accuracy, abstained) = match &labeler {
            Some(l) => {
                let (a, ab) = label_range(l, data, range)?;
                (Some(a), ab)
            }
            None => (None, 0),
        };
        let estimated_accuracy = match state.batches_seen() {
            0 => vec![None; data.votes.num_sources()],
            _ => state.source_accuracies()?,
        };
        batches.push(BatchRecord {
            batch: b,
            start: range.start,
            size: range.len(),
            accuracy,
            updated: error.is_none(),
            error,
            abstained,
            estimated_accuracy,
        });
    }
    let mean_accuracy = match mean_of(&batches) {
        Some(m) => m,
        None => return Err(first_error.unwrap_or(Error::EmptyBatch)),
    };
    Ok(EvalReport {
        mode: EvalMode::Incremental,
        failed_batches: batches.iter().filter(|b| !b.updated).count(),
        batches,
        mean_accuracy,
        per_source_accuracy: data.source_accuracy(),
        baseline_accuracy: None,
        config: config.clone(),
    })
}

/// Estimates once from every example pooled, then labels the same minibatch
/// boundaries as [`run_incremental`].
pub fn run_offline_baseline(data: &LabeledData, config: &HarnessConfig) -> Result<EvalReport> {
    let ranges = minibatch_partition(data.len(), config.num_batches)?;
    let mut state = EstimatorState::new(data.votes.domain().num_classes(), &config.estimator)?;
    state.update(&data.votes.slice(0..data.len(), 0), &config.estimator)?;
    let labeler = state.labeler()?;
    let estimated = state.source_accuracies()?;
    let mut batches = Vec::with_capacity(ranges.len());
    for (b, range) in ranges.iter().enumerate() {
        let (acc, abstained) = label_range(&labeler, data, range)?;
        batches.push(BatchRecord {
            batch: b,
            start: range.start,
            size: range.len(),
            accuracy: Some(acc),
            updated: true,
            error: None,
            abstained,
            estimated_accuracy: estimated.clone(),
        });
    }
    let mean_accuracy = mean_of(&batches).expect("every batch is labeled");
    Ok(EvalReport {
        mode: EvalMode::Baseline,
        batches,
        mean_accuracy,
        per_source_accuracy: data.source_accuracy(),
        baseline_accuracy: Some(mean_accuracy),
        failed_batches: 0,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTest {
    /// One-based test number.
    pub test: usize,
    pub folds: Vec<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub mode: EvalMode,
    pub tests: Vec<FoldTest>,
    /// Mean over tests of each test's mean accuracy.
    pub mean_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
}

/// Runs one test per fold rotation. Incremental tests also record the
/// baseline on the same sequence.
pub fn run_folds(data: &LabeledData, config: &HarnessConfig, mode: EvalMode, num_folds: usize) -> Result<FoldReport> {
    let folds = fold_split(data.len(), num_folds)?;
    let mut tests = Vec::with_capacity(num_folds);
    for t in 1..=num_folds {
        let seq = data.gather(&test_sequence(&folds, t)?);
        let report = match mode {
            EvalMode::Incremental => {
                let mut r = run_incremental(&seq, config)?;
                r.baseline_accuracy = Some(run_offline_baseline(&seq, config)?.mean_accuracy);
                r
            }
            EvalMode::Baseline => run_offline_baseline(&seq, config)?,
        };
        log::info!("test {t}: mean accuracy {:.5}", report.mean_accuracy);
        tests.push(FoldTest { test: t, folds: test_fold_order(num_folds, t)?, report });
    }
    let n = tests.len() as f64;
    let mean_accuracy = tests.iter().map(|t| t.report.mean_accuracy).sum::<f64>() / n;
    let baseline_accuracy = tests.iter().map(|t| t.report.baseline_accuracy).sum::<Option<f64>>().map(|s| s / n);
    Ok(FoldReport { mode, tests, mean_accuracy, baseline_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub mean_accuracy: f64,
}

fn sorted_alphas(alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidConfig(format!("alpha grid {alphas:?} leaves [0, 1]")));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

fn with_alpha(config: &HarnessConfig, alpha: f64) -> HarnessConfig {
    let mut c = config.clone();
    c.estimator.alpha = alpha;
    c
}

/// One incremental run over the whole sequence per α, sorted by α.
pub fn alpha_sweep(data: &LabeledData, config: &HarnessConfig, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    sorted_alphas(alphas)?
        .into_iter()
        .map(|alpha| {
            let r = run_incremental(data, &with_alpha(config, alpha))?;
            Ok(SweepRow { alpha, mean_accuracy: r.mean_accuracy })
        })
        .collect()
}

/// The sweep under the fold protocol: each α scores its mean over all tests.
pub fn alpha_sweep_folds(
    data: &LabeledData,
    config: &HarnessConfig,
    alphas: &[f64],
    num_folds: usize,
) -> Result<Vec<SweepRow>> {
    let folds = fold_split(data.len(), num_folds)?;
    let sequences: Vec<LabeledData> =
        (1..=num_folds).map(|t| Ok(data.gather(&test_sequence(&folds, t)?))).collect::<Result<_>>()?;
    sorted_alphas(alphas)?
        .into_iter()
        .map(|alpha| {
            let c = with_alpha(config, alpha);
            let mut total = 0.0;
            for seq in &sequences {
                total += run_incremental(seq, &c)?.mean_accuracy;
            }
            Ok(SweepRow { alpha, mean_accuracy: total / sequences.len() as f64 })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn batch_rows(w: &mut impl Write, prefix: &str, report: &EvalReport) -> io::Result<()> {
    for b in &report.batches {
        let est: Vec<String> = b.estimated_accuracy.iter().map(|a| opt(*a)).collect();
        writeln!(
            w,
            "{prefix}{},{},{},{},{},{},{}",
            b.batch,
            b.start,
            b.size,
            opt(b.accuracy),
            b.updated,
            b.abstained,
            est.join(",")
        )?;
    }
    Ok(())
}

fn source_columns(m: usize) -> String {
    (1..=m).map(|i| format!("est_acc_{i}")).collect::<Vec<_>>().join(",")
}

/// One row per batch.
pub fn write_batch_csv(report: &EvalReport, mut w: impl Write) -> io::Result<()> {
    let m = report.per_source_accuracy.len();
    writeln!(w, "batch,start,size,accuracy,updated,abstained,{}", source_columns(m))?;
    batch_rows(&mut w, "", report)
}

/// One row per batch of every test.
pub fn write_fold_csv(report: &FoldReport, mut w: impl Write) -> io::Result<()> {
    let m = report.tests.first().map_or(0, |t| t.report.per_source_accuracy.len());
    writeln!(w, "test,batch,start,size,accuracy,updated,abstained,{}", source_columns(m))?;
    for t in &report.tests {
        batch_rows(&mut w, &format!("{},", t.test), &t.report)?;
    }
    Ok(())
}

/// Two rows: the α values, then the mean accuracy under each.
pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl Write) -> io::Result<()> {
    let alphas: Vec<String> = rows.iter().map(|r| r.alpha.to_string()).collect();
    let accs: Vec<String> = rows.iter().map(|r| format!("{:.5}", r.mean_accuracy)).collect();
    writeln!(w, "alpha,{}", alphas.join(","))?;
    writeln!(w, "accuracy,{}", accs.join(","))
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, mut w: impl Write) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
}
