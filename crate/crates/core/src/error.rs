use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("numeric divergence at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("non-finite loss for batch item {index}")]
    NonFiniteLoss { index: usize },

    #[error("pretraining did not reach loss {threshold:.6} within {iterations} iterations (final smoothed loss {final_loss:.6})")]
    NotConverged {
        iterations: usize,
        final_loss: f64,
        threshold: f64,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("rank constraint violated: {0}")]
    Rank(String),

    #[error("rank mismatch: checkpoint has r1={found}, model expects r1={expected}")]
    RankMismatch { expected: usize, found: usize },

    #[error("attempted update of frozen parameter `{0}`")]
    Frozen(String),

    #[error("backward called without a forward cache")]
    MissingCache,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }

    /// True for failures of the numerical process itself (divergence, NaN, no convergence).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Divergence { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NotConverged { .. }
                | Error::Verification(_)
        )
    }
}
