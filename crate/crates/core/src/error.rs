use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("age {age} outside life table range [{min}, {max}]")]
    AgeOutOfRange { age: u32, min: u32, max: u32 },

    #[error("infeasible distribution: {0}")]
    Infeasible(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid target set: {0}")]
    InvalidTargets(String),

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("likelihood evaluation failed at point {point}: {message}")]
    Likelihood { point: usize, message: String },

    #[error("simulation failed for draw {draw}: {message}")]
    Simulation { draw: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
