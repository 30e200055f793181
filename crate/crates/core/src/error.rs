use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("point {point:?} lies outside the admissible domain")]
    Domain { point: Vec<f64> },

    #[error("time {t} outside [0, {horizon})")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("non-finite coefficient evaluation ({what}) at {point:?}")]
    Evaluation { what: &'static str, point: Vec<f64> },

    #[error("degenerate pair: x and y coincide at {point:?}")]
    DegeneratePair { point: Vec<f64> },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid sample region: {0}")]
    Region(String),

    #[error("invalid flow grid: {0}")]
    Grid(String),

    #[error("simulation produced NaN (anchor {anchor}, path {path}, step {step})")]
    Simulation { anchor: usize, path: usize, step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown model '{name}'; available: {}", available.join(", "))]
    UnknownModel { name: String, available: Vec<String> },

    #[error("unknown check '{name}'; valid ids: {}", valid.join(", "))]
    UnknownCheck { name: String, valid: Vec<String> },

    #[error("empty sample")]
    EmptySample,

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
