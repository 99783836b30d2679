use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{name} must be {constraint}, got {value}")]
    InvalidParameter {
        name: &'static str,
        constraint: &'static str,
        value: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix dimension {dim} exceeds the dense SVD cap {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("SVD failed to converge")]
    SvdFailure,

    #[error("eigenvalue solver failed to converge (ill-conditioned input)")]
    EigenFailure,

    #[error("coefficients are not stationary: companion spectral radius {0}")]
    NonStationary(f64),

    #[error("non-finite iterate at iteration {iter} of {solver}")]
    Diverged { solver: &'static str, iter: usize },

    #[error("least-squares system is rank deficient")]
    RankDeficient,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, constraint: &'static str, value: f64) -> Error {
    Error::InvalidParameter {
        name,
        constraint,
        value,
    }
}
