use thiserror::Error;

use crate::matern::MaternParams;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Clone, Error)]
pub enum SpaceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate local fit at {at}; try a larger bandwidth")]
    DegenerateFit { at: String },

    #[error("degenerate eigenvalue: base eigenvalue {k} is {value}, not strictly positive")]
    DegenerateEigenvalue { k: usize, value: f64 },

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("conditioning failure: {0}")]
    Conditioning(String),

    #[error("no spatial signal: every empirical correlation is non-positive")]
    NoSignal,

    #[error("optimizer did not converge on any start (best objective {objective:.3e})")]
    ConvergenceFailure {
        best: Option<MaternParams>,
        objective: f64,
    },

    #[error("buffer of {buffer} leaves fold {fold} without training curves")]
    BufferTooLarge { buffer: f64, fold: usize },

    #[error("unstable test: {dropped} of {total} bootstrap refits failed")]
    UnstableTest { dropped: usize, total: usize },

    #[error("unstable run: {failed} of {total} replicates of scenario '{scenario}' failed")]
    UnstableRun {
        scenario: String,
        failed: usize,
        total: usize,
    },
}

impl SpaceError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SpaceError::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numbers rather than the inputs' shape.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            SpaceError::InvalidArgument(_)
                | SpaceError::InvalidData(_)
                | SpaceError::BufferTooLarge { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SpaceError>;
