use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular linear system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("solver diverged at t = {t:.6} s")]
    Diverged { t: f64 },
    #[error("Newton iteration failed to converge at t = {t:.6} s (step {h:.3e} s)")]
    NewtonFailure { t: f64, h: f64 },
    #[error("eigenvalue iteration did not converge after {iterations} sweeps")]
    EigenNoConvergence { iterations: usize },
    #[error("output extraction: {0}")]
    Extraction(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
