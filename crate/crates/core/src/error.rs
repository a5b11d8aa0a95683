use thiserror::Error;

/// Errors raised anywhere in the platform. Variants map one-to-one onto the
/// wire error codes returned by the cloud and edge APIs.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("key generation failed after {0} attempts")]
    Keygen(usize),
    #[error("merge error: {0}")]
    Merge(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("edge `{0}` is already registered")]
    DuplicateEdge(String),
    #[error("stale round: current round is {current}")]
    StaleRound { current: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("surrogate training timed out: {0}")]
    SurrogateTrainingTimeout(String),
    #[error("unknown aggregator source `{0}`")]
    UnknownAggregator(String),
    #[error("encrypted inference timed out after {0} polls")]
    HeTimeout(u32),
    #[error("feature disabled: {0}")]
    FeatureDisabled(String),
    #[error("cloud unreachable: {0}")]
    Unreachable(String),
    #[error("storage error: {0}")]
    Storage(String),
}

impl Error {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::EmptyDataset => "empty_dataset",
            Error::SchemaMismatch(_) => "schema_mismatch",
            Error::Divergence(_) => "divergence",
            Error::Decode(_) => "decode",
            Error::Keygen(_) => "keygen",
            Error::Merge(_) => "merge",
            Error::Auth(_) => "auth",
            Error::DuplicateEdge(_) => "duplicate_edge",
            Error::StaleRound { .. } => "stale_round",
            Error::Protocol(_) => "protocol",
            Error::NotFound(_) => "not_found",
            Error::SurrogateTrainingTimeout(_) => "surrogate_timeout",
            Error::UnknownAggregator(_) => "unknown_aggregator",
            Error::HeTimeout(_) => "he_timeout",
            Error::FeatureDisabled(_) => "feature_disabled",
            Error::Unreachable(_) => "unreachable",
            Error::Storage(_) => "storage",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Decode(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Storage(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
