use thiserror::Error;

/// Errors raised by the numerical kernels and the batch front-end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("series did not converge: {0}")]
    NonConvergence(String),

    #[error("angular profile not found: {0}")]
    ProfileNotFound(String),

    #[error("integrator step-size failure at t = {t:.6e}: {reason}")]
    StepSize { t: f64, reason: String },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("exponent is not JL-supercritical: {0}")]
    NotSupercritical(String),

    #[error("Newton iteration diverged after {iterations} iterations (residual {residual:.3e}); damping trace {trace:?}")]
    NewtonDivergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error("singular matrix at pivot {0}")]
    Singular(usize),

    #[error("positivity lost at s = {s:.6}: min value {min:.3e}")]
    PositivityLoss { s: f64, min: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
