use thiserror::Error;

pub type Result<T, E = DorqfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DorqfError {
    #[error("insufficient sample: need at least 2 observations, got {0}")]
    InsufficientSample(usize),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("invalid probability grid: {0}")]
    InvalidGrid(String),

    #[error("quantile functions are evaluated on different grids")]
    GridMismatch,

    #[error("values are not non-decreasing: drop of {drop:.3e} at grid index {index}")]
    NotMonotone { index: usize, drop: f64 },

    #[error("invalid range: upper bound {hi} must exceed lower bound {lo}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("value {value} out of declared range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("{what} = {value} is outside [0, 1]")]
    OutsideUnitInterval { what: String, value: f64 },

    #[error("subset enumeration too large: {0} scalar covariates (limit 20)")]
    TooManyCovariates(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular normal equations")]
    Singular,

    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:.3e})")]
    NotPositiveSemidefinite(f64),

    #[error("constraints are infeasible")]
    Infeasible,

    #[error(
        "quadratic program did not converge after {iterations} iterations \
         (primal violation {primal_violation:.3e}, stationarity {stationarity:.3e})"
    )]
    NotConverged {
        iterations: usize,
        best: Vec<f64>,
        primal_violation: f64,
        stationarity: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation study failed: {failed} of {total} replications failed")]
    StudyFailed { failed: usize, total: usize },
}

impl DorqfError {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DorqfError::Singular
                | DorqfError::NotPositiveSemidefinite(_)
                | DorqfError::Infeasible
                | DorqfError::NotConverged { .. }
                | DorqfError::StudyFailed { .. }
        )
    }
}
