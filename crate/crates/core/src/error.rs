use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("build error at layer {layer}: {message}")]
    Build { layer: usize, message: String },

    #[error("incompatible shapes: {0}")]
    Incompatible(String),

    #[error("invalid partition: {0}")]
    Validation(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("stage {stage}, epoch {epoch}: {source}")]
    Training {
        stage: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension { op, left: left.to_vec(), right: right.to_vec() }
    }

    pub(crate) fn in_epoch(self, stage: usize, epoch: usize) -> Self {
        match self {
            already @ Error::Training { .. } => already,
            other => Error::Training { stage, epoch, source: Box::new(other) },
        }
    }

    /// Innermost error, with any stage/epoch context peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Training { source, .. } => source.root(),
            other => other,
        }
    }
}
