use thiserror::Error;

/// Errors surfaced by the numerical routines and the command-line driver.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("support radius {support:.6} exceeds 0.8*R_max = {limit:.6}; rerun with a larger R_max")]
    SupportTouchesBoundary { support: f64, limit: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse: {0}")]
    Parse(String),
}

impl LabError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Precondition(_) | LabError::SupportTouchesBoundary { .. } => 2,
            LabError::NonConvergence { .. } | LabError::Numerical(_) => 3,
            LabError::Io(_) | LabError::Json(_) | LabError::Parse(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn precondition<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Precondition(msg.into()))
}
