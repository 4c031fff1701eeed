use std::path::PathBuf;

use thiserror::Error;

use crate::skeleton::AirwayId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown airway id {0}")]
    UnknownAirway(AirwayId),

    #[error("invalid tree: airway {airway:?}, field `{field}`: {reason}")]
    InvalidTree {
        airway: Option<AirwayId>,
        field: &'static str,
        reason: String,
    },

    #[error("invalid configuration `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("vector is not unit length (norm {0})")]
    NonUnitVector(f64),

    #[error("direction is gimbal-degenerate (|d_x| = 1)")]
    GimbalDegenerate,

    #[error("degenerate direction set: all directions are collinear")]
    DegenerateDirections,

    #[error("pointing vectors are antiparallel; roll error is undefined")]
    AntiparallelPointing,

    #[error("probability {value} out of [0, 1] for airway {airway}")]
    ProbabilityOutOfRange { airway: usize, value: f64 },

    #[error("row capacity mismatch: {0} vs {1}")]
    CapacityMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("active airway {0} is not visible")]
    AirwayNotVisible(AirwayId),

    #[error("tree hash mismatch: log was recorded on {expected}, replaying on {actual}")]
    TreeHashMismatch { expected: String, actual: String },

    #[error("malformed log {path}, line {line}: {reason}")]
    MalformedLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Serde(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    /// Attaches a path to an I/O error.
    pub fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn tree(airway: Option<AirwayId>, field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidTree {
            airway,
            field,
            reason: reason.into(),
        }
    }
}
