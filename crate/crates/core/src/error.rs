use std::io;

/// Errors produced by the engine, the models and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate embedding at row {row}: norm {norm:e} is at or below the guard")]
    DegenerateEmbedding { row: usize, norm: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numeric failure: {message} (residual {residual:e})")]
    Numeric { message: String, residual: f64 },
    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by the numbers themselves (divergence, degenerate
    /// embeddings, non-convergence) as opposed to bad inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::DegenerateEmbedding { .. } | Error::NonFinite(_) | Error::Numeric { .. } => true,
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
