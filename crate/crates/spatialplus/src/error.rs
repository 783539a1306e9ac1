use thiserror::Error;

/// Crate-wide error type covering basis construction, fitting, simulation
/// and the I/O surface of the command-line tool.
#[derive(Error, Debug)]
pub enum Error {
    #[error("duplicate locations at indices {0} and {1} (h_min = 0)")]
    DuplicatePoints(usize, usize),

    #[error("polynomial block is rank deficient: locations do not span degree-{0} monomials")]
    RankDeficientPolynomialBlock(usize),

    #[error("spline order m = {m} must satisfy m > d/2 for dimension d = {d}")]
    OrderTooSmall { m: usize, d: usize },

    #[error("need at least {needed} locations for order {m} in dimension {d}, got {got}")]
    TooFewPoints {
        needed: usize,
        got: usize,
        m: usize,
        d: usize,
    },

    #[error("truncation rank {k} out of range [{min}, {max}]")]
    RankOutOfRange { k: usize, min: usize, max: usize },

    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("smoothing parameter must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("GCV denominator degenerate: effective degrees of freedom {edf:.3} >= n = {n}")]
    DegenerateDenominator { edf: f64, n: usize },

    #[error("design matrix is singular or nearly singular")]
    SingularDesign,

    #[error("covariate lies in the unpenalized polynomial span; effect is not identifiable")]
    CollinearCovariateWithNullspace,

    #[error("spatial residuals of covariate {index} are degenerate (|r|/|x| = {ratio:.2e})")]
    DegenerateResiduals { index: usize, ratio: f64 },

    #[error("PIRLS did not converge within {0} iterations")]
    PirlsDivergence(usize),

    #[error("response outside the support of the {family} family at index {index}")]
    InvalidResponse { family: String, index: usize },

    #[error("step halving exhausted after {0} halvings without decreasing the penalized deviance")]
    StepHalvingExhausted(usize),

    #[error("mean {mu} outside the valid range of the {family} family")]
    MeanOutOfRange { family: String, mu: f64 },

    #[error("covariance matrix not positive definite even with diagonal jitter {max_jitter:.1e}")]
    CovarianceNotPsd { max_jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty smoothing-parameter grid")]
    EmptyGrid,

    #[error("missing column `{0}` in input data")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("failed to parse `{value}` as a number for column `{column}` (row {row})")]
    ParseValue {
        column: String,
        row: usize,
        value: String,
    },

    #[error("replicate failure rate {failed}/{total} exceeds 5%")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
