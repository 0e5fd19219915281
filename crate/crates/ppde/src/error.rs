use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("window [{s}, {t}] is empty or reversed")]
    EmptyWindow { s: f64, t: f64 },

    #[error("window [{s}, {t}] is shorter than 1e-12 of the horizon")]
    WindowTooShort { s: f64, t: f64 },

    #[error("degenerate window [{s}, {t}]: centered moment m = {m:e} is numerically zero")]
    DegenerateWindow { s: f64, t: f64, m: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("exponent regression needs windows of at least two distinct widths")]
    DegenerateRegression,

    #[error("path grid [{start}, {end}] does not cover [{s}, {t}]")]
    PathCoverage { start: f64, end: f64, s: f64, t: f64 },

    #[error("parametrix series did not converge: order {order}, tail {tail:e} against target {target:e}")]
    NonConvergence { order: usize, tail: f64, target: f64 },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("finite-difference step {step:e} is below the quadrature noise floor {floor:e}")]
    StepUnderflow { step: f64, floor: f64 },

    #[error("admissibility violated: {0}")]
    Admissibility(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
