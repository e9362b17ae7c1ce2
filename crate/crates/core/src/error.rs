use thiserror::Error;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("simulation time moved backward: {previous} s -> {requested} s")]
    TimeReversal { previous: f64, requested: f64 },

    #[error("pixel index ({b}, {a}, {d}) outside volume of {dims:?}")]
    IndexOutOfRange {
        b: usize,
        a: usize,
        d: usize,
        dims: [usize; 3],
    },

    #[error("point ({x:.3}, {y:.3}, {z:.3}) µm is outside the field of view")]
    OutsideFieldOfView { x: f64, y: f64, z: f64 },

    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("measurement is not finite: {0}")]
    NonFiniteMeasurement(f64),

    #[error("scenario kind mismatch: {0}")]
    WrongScenarioKind(&'static str),

    #[error("malformed trace: {0}")]
    Trace(String),

    #[error("malformed volume file: {0}")]
    VolumeFormat(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
