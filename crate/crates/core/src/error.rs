use thiserror::Error;

/// Errors raised by tensor numerics, kernels, model assembly and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            field,
            detail: detail.into(),
        }
    }
}
