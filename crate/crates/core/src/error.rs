use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("standard deviation must be strictly positive (index {index}, value {value})")]
    NonPositiveStd { index: usize, value: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("pool weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("invalid pool weight {0}")]
    InvalidWeight(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("devices {0} and {1} are at the same location")]
    CoincidentLocations(usize, usize),
    #[error("channel gain must be positive (got {0})")]
    NonPositiveGain(f64),
    #[error("matrix is not row-stochastic: {0}")]
    NotRowStochastic(String),
    #[error("trace violates the log-likelihood-ratio bound: column norm {norm} exceeds L = {bound} at step {step}")]
    BoundViolated { step: usize, norm: f64, bound: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("partition failed: {0}")]
    Partition(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("delay constraint violated on link {from}->{to}: {delay} s > {max} s")]
    DelayViolation { from: usize, to: usize, delay: f64, max: f64 },
    #[error("io error: {0}")]
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
