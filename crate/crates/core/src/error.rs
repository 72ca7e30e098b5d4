use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("insufficient exceedances: {found} found, {required} required")]
    InsufficientExceedances { found: usize, required: usize },

    #[error("GPD moments undefined for shape xi = {0} (requires xi < 1/2)")]
    MomentUndefined(f64),

    #[error("total power must be positive, got {0}")]
    NonPositivePower(f64),

    #[error("{skipped} of {total} Monte Carlo realizations had a singular pilot Gram matrix")]
    TooManySingular { skipped: usize, total: usize },

    #[error("slot {slot}: SCA objective regressed by {drop:e}")]
    ObjectiveRegression { slot: usize, drop: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
