use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the chart cube of half-width {halfwidth}")]
    OutOfChart { point: Vec<f64>, halfwidth: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error(
        "perturbation amplitude {epsilon} is not below the positivity threshold {threshold:.6}"
    )]
    AmplitudeTooLarge { epsilon: f64, threshold: f64 },

    #[error("trajectory left the chart before completing a single step")]
    EmptyTrajectory,

    #[error("energy drift {drift:.3e} exceeds tolerance {tolerance:.3e}; reduce the step size")]
    EnergyDrift { drift: f64, tolerance: f64 },

    #[error("model does not expose normal-form coefficients along the axis")]
    UnsupportedModel,

    #[error("{0}")]
    Usage(String),

    #[error("fundamental matrix nearly singular at s = {s} (condition estimate {cond:.3e})")]
    NearSingular { s: f64, cond: f64 },

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("shooting Jacobian ill-conditioned (equilibrated condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error(
        "grid resolution {n} cannot resolve delta = {delta}; need at least {min_n} cells per axis"
    )]
    Unresolved { n: usize, delta: f64, min_n: usize },

    #[error("empty domain for norm")]
    EmptyDomain,

    #[error("need at least {needed} sweep records, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
