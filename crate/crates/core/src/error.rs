use thiserror::Error;

/// Failure categories shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate state: {0}")]
    DegenerateState(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("hermiticity violation: {0}")]
    HermiticityViolation(String),

    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate parametrization: {0}")]
    DegenerateParametrization(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch")]
    Checksum,

    #[error("malformed payload: {0}")]
    MalformedPayload(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-parsable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) | Error::DimensionMismatch(_) | Error::Shape(_) => {
                "dimension-mismatch"
            }
            Error::NumericFailure(_)
            | Error::DegenerateState(_)
            | Error::DegenerateParametrization(_)
            | Error::HermiticityViolation(_)
            | Error::InvalidProbability(_) => "numeric-failure",
            Error::OutOfRange(_) | Error::Contract(_) | Error::Dataset(_) => "bad-input",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Checksum => "checksum-failure",
            Error::MalformedPayload(_) => "malformed-payload",
            Error::Io(_) => "missing-file",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
