use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("unknown registry name `{0}`")]
    UnknownRegistryName(String),
    #[error("parameter `{name}` out of range: {reason}")]
    ParameterOutOfRange { name: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("index {index} out of range for cloud of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite state at step {step} (path {path})")]
    NonFiniteState { step: usize, path: usize },
    #[error("missing analytic derivative: {0}")]
    MissingDerivative(String),
    #[error("rank-deficient regression design ({basis} basis functions, {samples} samples); use ridge > 0")]
    RankDeficient { basis: usize, samples: usize },
    #[error("too few samples for regression: {samples} < {basis}")]
    TooFewSamples { samples: usize, basis: usize },
    #[error("Picard iteration did not converge in {iterations} iterations (last distance {last:.3e})")]
    PicardNotConverged { iterations: usize, last: f64, history: Vec<f64> },
    #[error("evaluation of `{term}` failed: {source}")]
    Term {
        term: String,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_term(self, term: impl Into<String>) -> Error {
        Error::Term { term: term.into(), source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
