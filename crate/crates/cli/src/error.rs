use thiserror::Error;

/// Failures mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed records, configuration or arguments.
    #[error("{0}")]
    Input(String),
    #[error("estimation failed: {0}")]
    Estimator(#[source] incws_core::Error),
    /// State file missing, locked or incompatible.
    #[error("{0}")]
    State(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::Estimator(_) => 3,
            CliError::State(_) => 4,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<incws_core::Error> for CliError {
    fn from(e: incws_core::Error) -> Self {
        use incws_core::Error as E;
        match e {
            E::OutOfDomainVote { .. }
            | E::TooFewSources(_)
            | E::EmptyBatch
            | E::RaggedBatch { .. }
            | E::InvalidClass { .. }
            | E::InvalidNumClasses(_)
            | E::InvalidConfig(_)
            | E::TooFewExamples { .. }
            | E::SourceCountMismatch { .. } => CliError::Input(e.to_string()),
            E::IncompatibleState(m) => CliError::State(m),
            other => CliError::Estimator(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
