use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariate `{name}` is degenerate: standard deviation is zero")]
    DegenerateCovariate { name: String },

    #[error("invalid spline basis: {0}")]
    InvalidBasis(String),

    #[error("difference order {order} out of range for {k} coefficients (need 1 <= order <= k - 1)")]
    InvalidPenaltyOrder { order: usize, k: usize },

    #[error("unsupported family/link combination: {0}")]
    InvalidFamily(String),

    #[error("observation {index}: value {value} is not valid for the {family} family")]
    InvalidResponse {
        index: usize,
        value: f64,
        family: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "transition matrix has no unique stationary distribution (reducible chain); \
         use an estimated initial distribution instead"
    )]
    ReducibleChain,

    #[error("non-finite state log-density at time index {index}")]
    NonFiniteDensity { index: usize },

    #[error("penalized information matrix is singular; try larger smoothing parameters or more restarts")]
    SingularInformation,

    #[error("non-finite entry in numerical Hessian at ({row}, {col})")]
    NonFiniteHessian { row: usize, col: usize },

    #[error("{failed} of {total} {what} failed")]
    TooManyFailures {
        what: &'static str,
        failed: usize,
        total: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
