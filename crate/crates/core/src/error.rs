use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at record {record}: {message}")]
    Parse { record: u64, message: String },

    #[error("missing cell for unit {unit} at time {time}")]
    MissingCell { unit: String, time: i64 },

    #[error("treatment indicator varies within unit {0}")]
    TreatmentNotConstantWithinUnit(String),

    #[error("covariate {column} varies within unit {unit}")]
    CovariateNotConstantWithinUnit { unit: String, column: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("aggregation horizon {horizon} must satisfy 0 < L < {n_post}")]
    HorizonTooLarge { horizon: usize, n_post: usize },

    #[error("non-finite value in input")]
    NonFiniteInput,

    #[error("linear system is singular or numerically indefinite")]
    SingularSystem,

    #[error("weight matrix is not symmetric positive definite")]
    NonPositiveDefiniteWeight,

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("singular regression design: {0}")]
    SingularDesign(String),

    #[error("requested rank {rank} exceeds the admissible maximum {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("eigen decomposition failed: {0}")]
    EigenFailure(String),

    #[error("control-group confounder second moment is singular")]
    SingularConfounderCov,

    #[error("average pre-period loading outer product is singular")]
    SingularVbar,

    #[error("regularization exponent {0} outside the open interval (0.5, 1)")]
    ExponentOutOfWindow(f64),

    #[error("regularization level must be positive and finite, got {0}")]
    InvalidLambda(f64),

    #[error("penalized normal equations are singular")]
    SingularPenalizedSystem,

    #[error("pre-period loadings have rank {rank}, expected {expected}")]
    RankDeficientLoadings { rank: usize, expected: usize },

    #[error("penalty does not single out a unique bridge function")]
    TargetNotUnique,

    #[error("confounder second moment at the treatment period is singular")]
    SingularSigma0,

    #[error("coefficient vector is not a bridge function (residual {0:.3e})")]
    TargetNotInBridgeSet(f64),

    #[error("every replication failed")]
    AllReplicationsFailed,
}

impl Error {
    /// True for errors caused by malformed input rather than a failed fit.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Parse { .. }
                | Error::MissingCell { .. }
                | Error::TreatmentNotConstantWithinUnit(_)
                | Error::CovariateNotConstantWithinUnit { .. }
                | Error::DimensionMismatch(_)
                | Error::HorizonTooLarge { .. }
                | Error::NonFiniteInput
                | Error::Domain(_)
                | Error::InvalidConfig(_)
                | Error::ExponentOutOfWindow(_)
                | Error::InvalidLambda(_)
                | Error::RankTooLarge { .. }
                | Error::DegenerateGroup(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
