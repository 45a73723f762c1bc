use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// One entry per violated invariant, each prefixed with the field name.
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("{what} = {value} is outside [0, 1]")]
    NotAProbability { what: &'static str, value: f64 },

    #[error("need at least 2 users, got {0}")]
    TooFewUsers(usize),

    #[error("exact enumeration supports at most {max} users, got {n}")]
    EnumerationBound { n: usize, max: usize },

    #[error("click pattern has {got} detectors, expected {expected}")]
    PatternSize { got: usize, expected: usize },

    #[error("an INVALID verdict has no canonical click pattern")]
    InvalidVerdict,

    #[error("phase error rule applies only to accepted all-X trials")]
    NotAnXTrial,

    #[error("mu is undefined: {0}")]
    MuDomain(String),

    #[error("protocol aborted: {0}")]
    Abort(String),

    #[error("cannot parse configuration: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
