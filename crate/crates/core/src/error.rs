use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

/// Broad failure category, used by front ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("every access point column was dropped")]
    EmptySignalSpace,
    #[error("no observed (non-sentinel) RSSI value in dataset")]
    NoObservedValues,
    #[error("degenerate RSSI range: min == max == {0}")]
    DegenerateRange(f64),
    #[error("too few samples: need at least {needed}, have {available}")]
    TooFewSamples { needed: usize, available: usize },
    #[error("dataset has no building/floor labels")]
    MissingLabels,
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("trace has {len} steps, step {requested} requested")]
    TraceTooShort { requested: usize, len: usize },
    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
    #[error("backward called with a cache that does not match the network")]
    StaleCache,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DimensionMismatch { .. } | Error::InvalidConfig(_) => ErrorKind::Config,
            Error::EmptyDataset
            | Error::EmptySignalSpace
            | Error::NoObservedValues
            | Error::DegenerateRange(_)
            | Error::TooFewSamples { .. }
            | Error::MissingLabels => ErrorKind::Data,
            Error::EmptyCohort
            | Error::TraceTooShort { .. }
            | Error::DivisionByZero(_)
            | Error::StaleCache => ErrorKind::Runtime,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
