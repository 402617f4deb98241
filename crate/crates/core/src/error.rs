use std::path::PathBuf;

use crate::game::JointTrajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Euler-angle rate map is singular at |pitch| = pi/2.
    #[error("attitude singularity: pitch {pitch} rad is outside (-pi/2, pi/2)")]
    Singularity { pitch: f64 },

    #[error("degenerate geometry: agents {distance:e} m apart")]
    DegenerateGeometry { distance: f64 },

    #[error("unknown agent id {0}")]
    UnknownAgent(usize),

    /// A solver iterate became non-finite. Carries the last finite iterate.
    #[error("numerical failure: {message}")]
    NumericalFailure { message: String, last_iterate: Box<JointTrajectory> },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
