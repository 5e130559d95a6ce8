use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation diverged: non-finite state at step {step}")]
    SimulationDiverged { step: usize },

    #[error("spherical angles are undefined at the origin")]
    UndefinedAngle,

    #[error("innovation covariance is singular or ill-conditioned")]
    IllConditionedInnovation,

    #[error("filter diverged at step {step}: {reason}")]
    FilterDiverged { step: usize, reason: String },

    #[error("all particle weights underflowed")]
    DegenerateWeights,

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 2,
            Error::SimulationDiverged { .. }
            | Error::FilterDiverged { .. }
            | Error::DegenerateWeights
            | Error::IllConditionedInnovation => 3,
            Error::MissingArtifact(_) => 4,
            _ => 1,
        }
    }
}
