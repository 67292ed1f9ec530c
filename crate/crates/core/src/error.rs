use thiserror::Error;

pub type Result<T> = std::result::Result<T, BllimError>;

#[derive(Debug, Error)]
pub enum BllimError {
    /// Cholesky factorization failed; `context` names the matrix (cluster, block, ...).
    #[error("matrix is not symmetric positive definite: {context}")]
    NotPositiveDefinite { context: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("not enough observations: n = {n}, at least {required} needed")]
    Infeasible { n: usize, required: usize },

    /// A cluster's responsibility mass fell below what its block structure can support.
    #[error("degenerate cluster {cluster} at iteration {iteration} (mass {mass:.3}, need {required:.3})")]
    DegenerateCluster {
        iteration: usize,
        cluster: usize,
        mass: f64,
        required: f64,
    },

    #[error("no model could be fitted: {0}")]
    NoModel(String),

    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: u64,
        column: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BllimError {
    pub(crate) fn not_pd(context: impl Into<String>) -> Self {
        BllimError::NotPositiveDefinite {
            context: context.into(),
        }
    }
}
