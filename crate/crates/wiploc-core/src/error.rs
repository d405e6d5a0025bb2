use thiserror::Error;

/// Library-wide error type.
///
/// Constructors and operations return `Err` instead of panicking for every
/// contract violation that can be triggered by caller input; panics are
/// reserved for internal invariant breakage.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A chip stream has the wrong length for the codebooks in use.
    #[error("malformed payload: expected {expected} chips, got {got}")]
    MalformedPayload { expected: usize, got: usize },

    /// Geometry that cannot be evaluated (e.g. coincident transmitter and
    /// receiver positions).
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A duty-cycle configuration with no non-negative sleep remainder.
    #[error("infeasible duty configuration: {0}")]
    InfeasibleConfig(String),

    /// Configuration validation failures. Collects every violation found
    /// rather than stopping at the first.
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// Metrics requested over an empty observation set.
    #[error("undefined metrics: {0}")]
    UndefinedMetrics(String),

    /// Scenario file syntax error.
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
