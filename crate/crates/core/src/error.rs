use std::fmt;

use weaksig_tensor::TensorError;

/// Failure classes. The CLI maps each variant family to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inputs or configuration outside their documented domain.
    #[error("{0}")]
    Validation(String),
    /// Stored artifacts that are malformed, truncated or fail a checksum.
    #[error("integrity: {0}")]
    Integrity(String),
    /// A non-finite loss during training.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    /// A pipeline or model stage failed; `stage` names it.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// The innermost error below any stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn validation(msg: impl fmt::Display) -> Error {
    Error::Validation(msg.to_string())
}

pub(crate) fn integrity(msg: impl fmt::Display) -> Error {
    Error::Integrity(msg.to_string())
}

/// Attaches a stage name to errors from `f`.
pub(crate) fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, source: Box::new(e) })
}

/// Runs a tensor computation and tags any failure with `name`.
pub(crate) fn tensor_stage<T>(name: &'static str, r: std::result::Result<T, TensorError>) -> Result<T> {
    stage(name, r.map_err(Error::from))
}
