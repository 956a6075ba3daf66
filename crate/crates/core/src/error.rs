use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("variable was recorded on a different tape")]
    ForeignVariable,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Failures caused by the numbers themselves rather than by usage or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. }
                | Error::NonFinite(_)
                | Error::Diverged { .. }
                | Error::RolloutDiverged { .. }
        )
    }

    pub fn is_io_or_format(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Checkpoint(_) | Error::Parse(_))
    }
}
