use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("empty dataset")]
    EmptyDataset,

    /// A monomial vector that no chain of weight matrices reproduces.
    #[error("infeasible realization: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("census limited to input dimension <= 3 (got {0})")]
    CensusDimension(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
