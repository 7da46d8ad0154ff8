use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("vote {value} at row {row}, column {col} is outside the label domain")]
    OutOfDomainVote { row: usize, col: usize, value: i64 },
    #[error("at least 3 sources are required, got {0}")]
    TooFewSources(usize),
    #[error("empty vote matrix")]
    EmptyBatch,
    #[error("ragged vote matrix: row {row} has {len} entries, expected {expected}")]
    RaggedBatch { row: usize, len: usize, expected: usize },
    #[error("class {class} outside 1..={num_classes}")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("at least 2 classes are required, got {0}")]
    InvalidNumClasses(usize),
    #[error("batch of {0} examples is too small to estimate a covariance")]
    DegenerateBatch(usize),
    #[error("matrix is numerically singular (condition estimate {condition:e})")]
    NotInvertible { condition: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("masked fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    FitNoConvergence { iterations: usize, grad_norm: f64, z: Vec<f64> },
    #[error("sign of z is ambiguous: consistency graph has {} components", components.len())]
    SignAmbiguity { components: Vec<Vec<usize>> },
    #[error("masked fit is underdetermined: {masked} masked pairs for {sources} sources")]
    Underdetermined { masked: usize, sources: usize },
    #[error("estimated c = {0} is not positive")]
    NonPositiveC(f64),
    #[error("source never votes")]
    NoCoverage,
    #[error("batch has {got} sources, state expects {expected}")]
    SourceCountMismatch { expected: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{needed} examples required, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("enumeration over {0} sources exceeds the limit of 8")]
    TooLarge(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible state: {0}")]
    IncompatibleState(String),
}

pub type Result<T> = std::result::Result<T, Error>;
