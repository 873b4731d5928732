use std::path::PathBuf;

use thiserror::Error;

use crate::sde_engine::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied something that violates a precondition.
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    /// A coefficient function produced a non-finite value.
    #[error("model error at {input}: {message}")]
    Model { input: String, message: String },

    #[error("step failed for particle {particle}: {source}")]
    Step {
        particle: usize,
        #[source]
        source: Box<Error>,
    },

    /// Non-finite state. Carries the trajectory up to the last finite snapshot.
    #[error("numerical divergence at t = {t}")]
    Divergence { t: f64, partial: Box<Trajectory> },

    #[error("assumption gate refused the run: {0}")]
    Gate(String),

    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
