use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("episode already finished after {steps} steps; call reset first")]
    EpisodeFinished { steps: usize },

    #[error("corrupt {what} at byte offset {offset}: {reason}")]
    Corrupt {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("no valid segment start for horizon {horizon}: longest episode has {longest} steps")]
    NoValidSegment { horizon: usize, longest: usize },

    #[error("non-finite return {value} for candidate sequence {index}")]
    NonFiniteReturn { index: usize, value: f64 },

    #[error("enumeration of {requested} trajectories exceeds cap of {cap}")]
    EnumerationCap { requested: u128, cap: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
