use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: mode {mode} expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        mode: usize,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid unfolding mode {0}; expected 1, 2 or 3")]
    InvalidMode(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-binary treatment value {value} at position {position}")]
    NonBinary { position: usize, value: u8 },

    #[error("no treated cells")]
    NoTreatedCells,

    #[error("empty cell selection: {0}")]
    EmptySelection(String),

    #[error(
        "positivity violated at unit {unit}, period {period}: probability {prob} outside ({delta}, 1 - {delta})"
    )]
    Positivity {
        unit: usize,
        period: usize,
        prob: f64,
        delta: f64,
    },

    #[error(
        "no simulated path is consistent with the conditioning treatment window at period {period}; increase n_samples (currently {n_samples})"
    )]
    NoConsistentPaths { period: usize, n_samples: usize },

    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by bad user input (as opposed to a failed computation).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::InvalidMode(_)
                | Error::NonBinary { .. }
                | Error::Parse { .. }
                | Error::MissingColumn(_)
                | Error::Config(_)
                | Error::ShapeMismatch { .. }
                | Error::DimensionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
