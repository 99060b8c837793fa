use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank deficient (condition ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unit {index} has leverage one; HC2/HC3 weights are undefined")]
    LeverageOne { index: usize },

    #[error("covariate covariance matrix is singular")]
    SingularCovariates,

    #[error("no usable anchor unit after {attempts} population redraws")]
    DegenerateAnchor { attempts: usize },

    #[error("invalid arm sizes: N = {n}, n1 = {n1}")]
    InvalidSizes { n: usize, n1: usize },

    #[error("acceptance exhausted after {attempts} attempts")]
    AcceptanceExhausted { attempts: u64 },

    #[error("no replication satisfied the balance criterion")]
    EmptyConditionSet,

    #[error("observed data do not support the statistic: {0}")]
    RankDeficientObserved(Box<Error>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures rooted in the data's numerical structure (rank,
    /// leverage, singular covariates) rather than in input or configuration.
    pub fn is_statistical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::LeverageOne { .. }
                | Error::SingularCovariates
                | Error::DegenerateAnchor { .. }
                | Error::AcceptanceExhausted { .. }
                | Error::EmptyConditionSet
                | Error::RankDeficientObserved(_)
        )
    }
}
