//! Label domain, vote-batch validation and one-vs-rest signed encodings.
//!
//! Votes are integers in `0..=k`; `0` means the source abstained. Every
//! downstream moment computation runs on a `{-1, 0, +1}` encoding of the
//! votes relative to one target class.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vote value reserved for "no label".
pub const ABSTAIN: u32 = 0;

/// Minimum number of sources for the masked fit to be identifiable.
pub const MIN_SOURCES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDomain {
    num_classes: usize,
}

impl LabelDomain {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidNumClasses(num_classes));
        }
        Ok(Self { num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, vote: i64) -> bool {
        vote >= 0 && vote as u64 <= self.num_classes as u64
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class == 0 || class > self.num_classes {
            return Err(Error::InvalidClass { class, num_classes: self.num_classes });
        }
        Ok(())
    }
}

/// A validated `q x m` block of source votes (rows are examples).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    votes: Vec<Vec<u32>>,
    num_sources: usize,
    domain: LabelDomain,
    pub batch_index: usize,
}

impl LabelBatch {
    pub fn votes(&self) -> &[Vec<u32>] {
        &self.votes
    }

    pub fn num_examples(&self) -> usize {
        self.votes.len()
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn domain(&self) -> LabelDomain {
        self.domain
    }

    /// A batch with no rows, used for empty streams.
    pub fn empty(num_sources: usize, domain: LabelDomain) -> LabelBatch {
        LabelBatch { votes: Vec::new(), num_sources, domain, batch_index: 0 }
    }

    /// Rows `range` as a new batch, keeping the domain.
    pub fn slice(&self, range: std::ops::Range<usize>, batch_index: usize) -> LabelBatch {
        LabelBatch {
            votes: self.votes[range].to_vec(),
            num_sources: self.num_sources,
            domain: self.domain,
            batch_index,
        }
    }

    /// Concatenation of row ranges, in order.
    pub fn gather(&self, ranges: &[std::ops::Range<usize>], batch_index: usize) -> LabelBatch {
        let votes = ranges.iter().flat_map(|r| self.votes[r.clone()].iter().cloned()).collect();
        LabelBatch { votes, num_sources: self.num_sources, domain: self.domain, batch_index }
    }
}

/// Validates a raw vote matrix against `domain`.
pub fn validate_batch(raw: &[Vec<i64>], domain: LabelDomain) -> Result<LabelBatch> {
    let first = raw.first().ok_or(Error::EmptyBatch)?;
    let m = first.len();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut votes = Vec::with_capacity(raw.len());
    for (row, values) in raw.iter().enumerate() {
        if values.len() != m {
            return Err(Error::RaggedBatch { row, len: values.len(), expected: m });
        }
        let mut out = Vec::with_capacity(m);
        for (col, &value) in values.iter().enumerate() {
            if !domain.contains(value) {
                return Err(Error::OutOfDomainVote { row, col, value });
            }
            out.push(value as u32);
        }
        votes.push(out);
    }
    if m < MIN_SOURCES {
        return Err(Error::TooFewSources(m));
    }
    Ok(LabelBatch { votes, num_sources: m, domain, batch_index: 0 })
}

/// Signed encoding of a batch relative to `target_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub values: DMatrix<f64>,
    pub target_class: usize,
}

/// Maps a single vote to `+1` (matches), `-1` (other class) or `0` (abstain).
pub fn encode_vote(vote: u32, class: usize) -> f64 {
    if vote == ABSTAIN {
        0.0
    } else if vote as usize == class {
        1.0
    } else {
        -1.0
    }
}

pub fn encode_one_vs_rest(batch: &LabelBatch, class: usize) -> Result<EncodedMatrix> {
    batch.domain.check_class(class)?;
    let (q, m) = (batch.num_examples(), batch.num_sources());
    let values = DMatrix::from_fn(q, m, |i, j| encode_vote(batch.votes[i][j], class));
    Ok(EncodedMatrix { values, target_class: class })
}

/// Fraction of rows on which each source voted.
pub fn coverage_rates(batch: &LabelBatch) -> Vec<f64> {
    let q = batch.num_examples() as f64;
    (0..batch.num_sources()).map(|j| batch.votes.iter().filter(|row| row[j] != ABSTAIN).count() as f64 / q).collect()
}
