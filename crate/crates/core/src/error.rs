use thiserror::Error;

/// Errors produced by the synthesis library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("block index ({i}, {j}) outside the lower triangle of horizon {horizon}")]
    BlockIndex { i: usize, j: usize, horizon: usize },

    #[error("diagonal block {index} is singular or ill-conditioned (condition number {condition:e})")]
    SingularBlock { index: usize, condition: f64 },

    #[error("matrix {name} is not {property}")]
    Definiteness { name: &'static str, property: &'static str },

    #[error("parameter {name} = {value} outside its valid range {range}")]
    Parameter { name: &'static str, value: f64, range: &'static str },

    #[error("data matrix is rank deficient: smallest singular value {sigma_min:e} <= tolerance {tolerance:e}")]
    RankDeficient { sigma_min: f64, tolerance: f64 },

    #[error("unknown method `{0}`")]
    Method(String),

    #[error("scenario program infeasible at eps_tol = {requested}; smallest feasible eps_tol found is {restored:?}")]
    ScenarioInfeasible { requested: f64, restored: Option<f64> },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
