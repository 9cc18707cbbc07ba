use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible trajectories: {left_len} samples @ dt={left_dt} vs {right_len} samples @ dt={right_dt}")]
    Incompatible {
        left_len: usize,
        left_dt: f64,
        right_len: usize,
        right_dt: f64,
    },

    #[error("simulation diverged at tick {tick}")]
    Diverged { tick: usize },

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input rather than by a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument(_) | Error::Incompatible { .. } | Error::Json(_) => true,
            Error::Scenario { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
