use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid mode index {0}, expected 1..=3")]
    InvalidMode(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("delay {delay:e} s outside the delay grid (max {max:e} s)")]
    DelayOutOfRange { delay: f64, max: f64 },
    #[error("user left the valid region: {0}")]
    InvalidGeometry(String),
    #[error("rank-deficient atom set")]
    RankDeficient,
    #[error("non-finite objective: {0}")]
    NonFinite(String),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("missing previous posterior for {0}")]
    MissingPosterior(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
