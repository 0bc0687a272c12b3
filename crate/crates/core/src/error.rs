use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by schedule construction, model evaluation, training and
/// evaluation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule needs at least 2 steps, got {0}")]
    ScheduleTooShort(usize),
    #[error("alpha_bar is not strictly decreasing at step {0}")]
    NonMonotonicSchedule(usize),
    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep order violated: t_prev {t_prev} must be below t {t}")]
    BadStepOrder { t: usize, t_prev: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid universe: {0}")]
    InvalidUniverse(String),
    #[error("covariance not positive definite")]
    DegenerateCovariance,
    #[error("unknown concept id {0}")]
    UnknownConcept(usize),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("adapter rank {rank} exceeds hidden width {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("adapter incompatible with host network: {0}")]
    AdapterShapeMismatch(String),
    #[error("training diverged: loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("no gamma entry for prior concept {0}")]
    MissingGamma(usize),
    #[error("prior concept set is empty")]
    EmptyPriorSet,
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("target alignment {0} too small; the model does not produce the target concept")]
    DegenerateAlignment(f64),
    #[error("denoising constant `{name}` not strictly positive ({value}); the sign analysis needs omega > 1")]
    NonPositiveStepConstant { name: &'static str, value: f64 },
    #[error("need at least {needed} samples per group, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
