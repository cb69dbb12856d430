use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("singular system in {op} (condition estimate {condition:e})")]
    Singular { op: &'static str, condition: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("diverged at {context}, iteration {iteration}")]
    Divergence { context: String, iteration: usize },

    #[error("training diverged in {0}")]
    Training(String),

    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &Shape, rhs: &Shape) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        }
    }

    pub fn at_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
