use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the inpainting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported scene version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("render weights are stale: the scene changed since the forward pass")]
    StaleWeights,

    #[error("point is {distance:.2} m from the centerline, outside the {limit} m corridor")]
    OutOfCorridor { distance: f64, limit: f64 },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("affinity undefined: {0}")]
    AffinityUndefined(String),

    #[error("no scoreable candidate placement")]
    NoCandidate,

    #[error("stale voxel index: {0}")]
    StaleIndex(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),
}

/// Process exit codes shared by every command-line entry point.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NO_CANDIDATE: i32 = 3;
    pub const IO: i32 = 4;
    pub const VALIDATION: i32 = 5;
}

impl Error {
    /// Machine-readable exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InfeasibleSpec(_) => exit_code::CONFIG,
            Error::NoCandidate => exit_code::NO_CANDIDATE,
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::MissingInput(_) => {
                exit_code::IO
            }
            Error::Validation(_)
            | Error::DimensionMismatch { .. }
            | Error::StaleWeights
            | Error::OutOfCorridor { .. }
            | Error::DegenerateTrajectory(_)
            | Error::AffinityUndefined(_)
            | Error::StaleIndex(_) => exit_code::VALIDATION,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
