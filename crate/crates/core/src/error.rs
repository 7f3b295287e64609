use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, found {found:?}")]
    Dimension {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown {kind} '{name}'")]
    Lookup { kind: &'static str, name: String },

    #[error("singular value in {0}")]
    Singularity(String),

    #[error("no face detected in {0}")]
    FaceNotDetected(String),

    #[error("segmenter found {found} instance(s) but {needed} are required")]
    InsufficientInstances { needed: usize, found: usize },

    #[error("branch synchronization failed: {0}")]
    Synchronization(String),

    #[error("incompatible artifact: expected fingerprint {expected}, found {found}")]
    Compatibility { expected: String, found: String },

    #[error("backend configuration: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("metric out of range: {0}")]
    MetricRange(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("step {step}: {source}")]
    Step { step: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Wraps the error with the step index it occurred at.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                step,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            e => e,
        }
    }
}
