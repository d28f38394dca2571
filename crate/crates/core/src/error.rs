use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An integrand or coefficient produced NaN/inf at a specific point.
    #[error("non-finite value in {context} at {point:?}")]
    NonFinite { context: String, point: Vec<f64> },

    #[error("derivative unavailable: {0} (no analytic Jacobian and finite differences disabled)")]
    MissingDerivative(String),

    #[error("unknown catalog field `{0}`")]
    UnknownField(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("trajectory {trajectory} exploded at step {step} (|X| = {norm:e})")]
    Explosion { trajectory: usize, step: usize, norm: f64 },

    #[error("{} trajectories failed; first: {}", .failures.len(), .failures.first().map(|(i, e)| format!("#{i}: {e}")).unwrap_or_default())]
    Ensemble { failures: Vec<(usize, Box<Error>)> },

    /// A log-space quadrature exceeded its cap or kept significant mass on
    /// the outermost nodes; the bound it feeds is unavailable.
    #[error("integral `{quantity}` diverges (log value {log_value:.3}, tail fraction {tail_fraction:.2e})")]
    Divergent {
        quantity: String,
        log_value: f64,
        tail_fraction: f64,
    },

    #[error("need at least {needed} trajectories, got {got}")]
    TooFewTrajectories { needed: usize, got: usize },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("explicit step {tau:e} violates stability bound {bound:e}")]
    Stability { tau: f64, bound: f64 },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>, point: &[f64]) -> Self {
        Error::NonFinite {
            context: context.into(),
            point: point.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
