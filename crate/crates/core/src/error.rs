use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the cable / quadrotor pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point separation {separation:.3e} m is below the {limit:.0e} m floor")]
    SeparationTooSmall { separation: f64, limit: f64 },

    #[error("cannot normalise a vector of norm {norm:.3e}")]
    ZeroNorm { norm: f64 },

    #[error("cable force in segment {index} vanished (|f| = {norm:.3e} N); the flatness recursion is undefined")]
    ZeroForce { index: usize, norm: f64 },

    #[error("thrust vector norm {norm:.3e} N is below the degeneracy floor")]
    DegenerateThrust { norm: f64 },

    #[error("body z-axis is aligned with the yaw reference axis (|b3 x y_c| = {sine:.3e})")]
    GimbalDegeneracy { sine: f64 },

    #[error("jet depth {have} is insufficient, at least {needed} required")]
    InsufficientDepth { needed: usize, have: usize },

    #[error("flatness recursion failed at mass {index}, t = {t:.4} s: {source}")]
    Recursion {
        index: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("flat output set does not match the topology: {0}")]
    FlatOutputMismatch(String),

    #[error("static equilibrium solver did not converge (residual {residual:.3e} N after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("non-finite state derivative at t = {t:.4} s")]
    NonFiniteDerivative { t: f64 },

    #[error("simulation unstable at t = {t:.4} s: speed {speed:.2} m/s exceeds {limit} m/s")]
    Unstable { t: f64, speed: f64, limit: f64 },

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("homotopy parameter must lie in (0, 1), got {0}")]
    InvalidLambda(f64),

    #[error("identification stage {stage} (lambda = {lambda}) failed to reduce the cost")]
    NoDescent { stage: usize, lambda: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{count} consecutive missing frames at t = {t:.3} s exceed the gap limit of {limit}")]
    ExcessiveGaps { count: usize, t: f64, limit: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, index: usize, t: f64) -> Self {
        match self {
            e @ Error::Recursion { .. } => e,
            e => Error::Recursion {
                index,
                t,
                source: Box::new(e),
            },
        }
    }

    /// True for the degeneracies of the flatness recursion (zero force, zero thrust, ...).
    pub fn is_degeneracy(&self) -> bool {
        match self {
            Error::Recursion { source, .. } => source.is_degeneracy(),
            Error::ZeroForce { .. }
            | Error::ZeroNorm { .. }
            | Error::DegenerateThrust { .. }
            | Error::GimbalDegeneracy { .. }
            | Error::SeparationTooSmall { .. } => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
