use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Rejected input: a dimension does not satisfy an operation's contract.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    /// Model or weight validation failure attributed to a named layer.
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("exact Shapley over {players} players exceeds the limit of {limit}; use the permutation sampler")]
    ExactLimit { players: usize, limit: usize },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("batch element {index} failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sampling aborted after {completed} of {requested} permutations: {source}")]
    SamplingAborted {
        completed: usize,
        requested: usize,
        #[source]
        source: Box<Error>,
    },

    /// A metric is undefined for this input (e.g. all-zero rectified saliency).
    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("image format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn layer(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// True when the failure originated in a scoring oracle, directly or
    /// through batch and sampling wrappers.
    pub fn is_oracle_failure(&self) -> bool {
        match self {
            Error::Oracle(_) => true,
            Error::Batch { source, .. } | Error::SamplingAborted { source, .. } => {
                source.is_oracle_failure()
            }
            _ => false,
        }
    }
}
