use thiserror::Error;

/// Errors raised by the selection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no reward sources")]
    NoRewardSources,

    #[error("reward out of range: {name}={value} (expected a value in [0,1])")]
    RewardOutOfRange { name: String, value: f64 },

    #[error("invalid log-probability {value} for candidate `{id}` (must be finite and <= 0)")]
    InvalidLogprob { id: String, value: f64 },

    #[error("candidate `{id}` has no log-probability")]
    MissingLogprob { id: String },

    #[error("candidate `{id}` has no reward scores")]
    MissingReward { id: String },

    #[error("candidate `{id}` has no token count (required for per-token normalization)")]
    MissingTokenCount { id: String },

    #[error("duplicate candidate id `{candidate_id}` in source `{source_id}`")]
    DuplicateCandidate {
        source_id: String,
        candidate_id: String,
    },

    #[error("source `{source_id}` has {k} candidates, need at least {min}")]
    TooFewCandidates {
        source_id: String,
        k: usize,
        min: usize,
    },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid direction `{0}` (expected `<src>-<tgt>`)")]
    Direction(String),

    #[error("method `{method}` is not handled by {selector}")]
    WrongMethod {
        method: &'static str,
        selector: &'static str,
    },

    #[error("utility matrix: {0}")]
    Utility(String),

    #[error("unresolved reference: {0}")]
    Unresolved(String),

    #[error("merge: {0}")]
    Merge(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("degenerate sampling distribution for source {source_index}")]
    DegenerateDistribution { source_index: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad input or configuration, as opposed
    /// to an I/O failure or a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Diverged { .. } | Error::Invariant(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
