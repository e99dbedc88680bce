use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. The CLI maps the variant family to
/// an exit code, so new variants must be placed in one of those families.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid growth operator: {0}")]
    Operator(String),
    #[error("layer mapping error: {0}")]
    Mapping(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("optimizer state corruption: {0}")]
    StateCorruption(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("degenerate loss range: l_max == l_min == {0}")]
    DegenerateRange(f64),
    #[error("race failed: {0}")]
    Race(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
