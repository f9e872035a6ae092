use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("observation matrix must be tall (p > d), got p={p}, d={d}")]
    NotTall { p: usize, d: usize },

    #[error("observation matrix is rank deficient: rank {rank} < d={d}")]
    RankDeficient { rank: usize, d: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid stepsize schedule: {}", .0.join("; "))]
    InvalidSchedule(Vec<String>),

    #[error("node index {index} out of range for p={p}")]
    NodeIndex { index: usize, p: usize },

    #[error("lambda value {value} at position {position} lies outside [-1, 1]")]
    LambdaRange { position: usize, value: f64 },

    #[error("exact checker limited to p <= {limit} (got p={p}); use --sampled")]
    TooLarge { p: usize, limit: usize },

    #[error("adversary count m={m} must be smaller than p={p}")]
    AdversaryCount { m: usize, p: usize },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("rate constant undefined: gamma is zero at n={0}")]
    GammaNotPositive(u64),

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
