use thiserror::Error;

use crate::time::RealTime;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration. Maps to CLI exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// A guest program failed to parse or resolve. Carries source location.
    #[error("{origin}:{line}: {msg}")]
    Program {
        origin: String,
        line: usize,
        msg: String,
    },

    /// Failure while a scenario is running. Maps to CLI exit code 3.
    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("cannot schedule event at {fire_at}: clock is already at {now}")]
    PastEvent { fire_at: RealTime, now: RealTime },

    #[error("cannot move artificial time from {now} back to {to}")]
    TimeRegression { now: u64, to: u64 },

    #[error("alarm at artificial time {at} is before now ({now})")]
    PastAlarm { at: u64, now: u64 },

    #[error("no pending alarms")]
    NoPendingAlarms,

    #[error("speed ratio must be at least 1, got {0}")]
    InvalidSpeedRatio(u64),

    #[error("slot {slot} recorded out of order (last recorded slot {last})")]
    SlotOrder { slot: u64, last: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn scenario(msg: impl Into<String>) -> Self {
        Error::Scenario(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by the inputs rather than by the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Program { .. })
    }
}
