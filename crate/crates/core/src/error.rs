use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: expected {expected}, got {got}")]
    InvalidDimension { expected: usize, got: usize },

    #[error("dimension must be at least 1")]
    EmptyDimension,

    #[error("schedule construction failed: {0}")]
    Schedule(String),

    #[error("schedule order violated: alpha_bar at t={t} ({alpha_bar}) is not below alpha_bar at t_prev={t_prev} ({alpha_bar_prev})")]
    ScheduleOrder {
        t: usize,
        t_prev: usize,
        alpha_bar: f64,
        alpha_bar_prev: f64,
    },

    #[error("coefficient domain error at t={t}: 1 - alpha_bar_prev - sigma^2 = {value}")]
    Domain { t: usize, value: f64 },

    #[error("invalid step plan: {0}")]
    InvalidPlan(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("optimization diverged at inner step {step}")]
    OptimizationDiverged { step: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("non-finite function value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("KL undefined: sigma is zero at chain step {step}")]
    UndefinedKl { step: usize },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("bad model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidDimension { expected, got });
    }
    Ok(())
}
