use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("record has no trial_id")]
    MissingId,
    #[error("trial {0} has no non-empty section")]
    EmptyProtocol(String),
    #[error("no recognizable trial records found in {0}")]
    Format(String),
    #[error("unknown trial {0}")]
    UnknownTrial(String),
    #[error("corpus too small: need {needed} distinct candidates, have {available}")]
    InsufficientCorpus { needed: usize, available: usize },

    #[error("LLM endpoint unavailable after {attempts} attempts: {message}")]
    LlmUnavailable { attempts: usize, message: String },
    #[error("no valid Q/A pairs in model output")]
    ParseFailure,
    #[error("offline mode and no cached completion for key {0}")]
    CacheMiss(String),

    #[error("cannot tokenize input: {0}")]
    TokenizationFailure(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("pool for section {0} has fewer than two entries")]
    PoolTooSmall(String),
    #[error("trial {0} has no section with at least two Q/A pairs")]
    NoEligibleSection(String),
    #[error("non-finite loss at {stage} epoch {epoch} step {step}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        step: usize,
    },
    #[error("backbone {0} is not trainable")]
    NotTrainable(String),

    #[error("duplicate trial {0}")]
    DuplicateTrial(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("candidate {0} is not in the index")]
    UnknownCandidate(String),
    #[error("query has no relevant items")]
    NoRelevant,

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    /// Variant name, for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::MissingId => "MissingId",
            Error::EmptyProtocol(_) => "EmptyProtocol",
            Error::Format(_) => "Format",
            Error::UnknownTrial(_) => "UnknownTrial",
            Error::InsufficientCorpus { .. } => "InsufficientCorpus",
            Error::LlmUnavailable { .. } => "LlmUnavailable",
            Error::ParseFailure => "ParseFailure",
            Error::CacheMiss(_) => "CacheMiss",
            Error::TokenizationFailure(_) => "TokenizationFailure",
            Error::InvalidInput(_) => "InvalidInput",
            Error::ZeroVector => "ZeroVector",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::PoolTooSmall(_) => "PoolTooSmall",
            Error::NoEligibleSection(_) => "NoEligibleSection",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::NotTrainable(_) => "NotTrainable",
            Error::DuplicateTrial(_) => "DuplicateTrial",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::UnknownCandidate(_) => "UnknownCandidate",
            Error::NoRelevant => "NoRelevant",
            Error::Config(_) => "Config",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
