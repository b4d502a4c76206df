use thiserror::Error;

pub type Result<T, E = CremError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CremError {
    #[error("invalid covariance function: {0}")]
    InvalidCovariance(String),

    #[error("covariance must satisfy A(1) = 1 for threshold computations, got A(1) = {0}")]
    NotNormalized(f64),

    #[error("depth {depth} is out of range (maximum {max})")]
    DepthOutOfRange { depth: usize, max: usize },

    #[error("enumerating depth {depth} exceeds the cap of {cap}")]
    EnumerationCap { depth: usize, cap: usize },

    #[error("inverse temperature {beta} is not below beta_min = {beta_min}")]
    OutsideHighTemperature { beta: f64, beta_min: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("chain did not finish on a leaf after {attempts} attempts ({steps} steps in total)")]
    RetriesExhausted { attempts: usize, steps: u64 },

    #[error("kernel violates detailed balance (max relative error {0:e})")]
    NotReversible(f64),

    #[error("no set has stationary mass in ({s}, 1 - {s})")]
    NoFeasibleSet { s: f64 },

    #[error("distributions have different depths ({0} vs {1})")]
    DepthMismatch(usize, usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
