use thiserror::Error;

/// Errors surfaced by model validation, kernel solvers, and pricers.
#[derive(Debug, Error)]
pub enum PricingError {
    #[error("transition matrix row {row} sums to {sum}, expected 1 (or entry out of [0,1])")]
    NonStochasticTransition { row: usize, sum: f64 },

    #[error("covariance matrix is not symmetric positive definite ({context})")]
    NonPositiveDefiniteCovariance { context: String },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("index out of range: {context}")]
    IndexOutOfRange { context: String },

    #[error("constraint matrix is rank deficient")]
    RankDeficientConstraint,

    #[error("degenerate Girsanov kernel: theta_t vanished at t={t} (Lambda singular)")]
    DegenerateKernel { t: usize },

    #[error("variance kernel fixed point did not converge after {iters} iterations (residual {residual})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("asset covariance block is singular at t={t}")]
    SingularAssetCovariance { t: usize },

    #[error("regime path enumeration would visit {paths} paths, exceeding cap {cap}")]
    EnumerationCapExceeded { paths: u128, cap: u128 },

    #[error("all candidate regime paths have zero likelihood")]
    AllZeroLikelihood,

    #[error("need at least 2 parameter draws, got {got}")]
    InsufficientDraws { got: usize },

    #[error("strike is required for this contract")]
    MissingStrike,

    #[error("quadrature failed to meet tolerance {tol} (estimate gap {gap})")]
    ToleranceNotMet { tol: f64, gap: f64 },

    #[error("Monte Carlo budget exceeded: {context}")]
    McBudgetExceeded { context: String },

    #[error("invalid model: {context}")]
    InvalidModel { context: String },
}
