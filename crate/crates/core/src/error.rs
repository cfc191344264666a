use std::io;
use std::path::PathBuf;
use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tier {tier_id}: i/o error: {source}")]
    Io {
        tier_id: u16,
        #[source]
        source: io::Error,
    },

    #[error("tier {tier_id}: subgroup {subgroup_id} is not stored here")]
    PlacementInconsistency { tier_id: u16, subgroup_id: u32 },

    #[error("tier {tier_id}: corrupt subgroup file: {reason}")]
    Format { tier_id: u16, reason: String },

    #[error("tier {tier_id}: bandwidth probe failed: {reason}")]
    ProbeFailed { tier_id: u16, reason: String },

    #[error("no tier has a positive bandwidth")]
    InvalidBandwidth,

    #[error("lock directory {path:?} unavailable: {source}")]
    LockDir {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("execution context already holds tier {held} while requesting tier {requested}")]
    LockNesting { held: u16, requested: u16 },

    #[error("non-finite gradient at element {index}")]
    GradientOverflow { index: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("scheduler made no progress for {0:?}")]
    SchedulerStall(Duration),

    #[error("i/o queue shut down before the operation completed")]
    Cancelled,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tier {tier_id}: needs {needed} bytes but only {available} are free")]
    InsufficientCapacity {
        tier_id: u16,
        needed: u64,
        available: u64,
    },

    #[error("{context}: {source}")]
    Output {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(tier_id: u16, source: io::Error) -> Self {
        Error::Io { tier_id, source }
    }

    pub(crate) fn output(context: impl Into<String>, source: io::Error) -> Self {
        Error::Output {
            context: context.into(),
            source,
        }
    }
}
