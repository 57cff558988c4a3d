use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid attention mask: {0}")]
    InvalidMask(String),

    #[error("capacity exceeded: one group needs {needed} tokens, budget is {budget}")]
    Capacity { needed: usize, budget: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint does not match model: {}", .offending.join(", "))]
    Load { offending: Vec<String> },

    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x}); dump at {dump:?}")]
    NonFiniteLoss {
        step: u64,
        batch_seed: u64,
        dump: Option<PathBuf>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
