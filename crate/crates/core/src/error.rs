use thiserror::Error;

/// Errors raised by the score laboratory.
///
/// Variants carry enough context to be shown to a user directly; the CLI
/// prefixes them with the owning module name.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid dimension {0}: must be at least 1")]
    InvalidDimension(usize),
    #[error("invalid horizon {0}: must be positive and finite")]
    InvalidHorizon(f64),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("operation `{op}` is not defined for {kind} models")]
    UnsupportedModel { op: &'static str, kind: String },
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample count must be at least 1")]
    EmptySample,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("score field has no trainable parameters")]
    NoParameters,
    #[error("exact divergence needs d <= {cap}, got d = {dim}; use sliced score matching instead")]
    DivergenceCap { dim: usize, cap: usize },
    #[error("evaluation time {t} is below the floor {floor} of a singular parametrization")]
    BelowTimeFloor { t: f64, floor: f64 },
    #[error("singular moment matrix: {0}")]
    SingularMatrix(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("sampler state became non-finite at step {step}")]
    SamplerDiverged { step: usize },
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    TrainingDiverged { iteration: usize, loss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter file: {0}")]
    ParamFormat(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
