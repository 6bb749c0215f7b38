use thiserror::Error;

/// Errors surfaced by the numerical pipelines.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("integrand evaluated to a non-finite value at ({g}, {sy})")]
    NonFiniteIntegrand { g: f64, sy: f64 },

    #[error("proximal iteration residual {residual:e} above tolerance after {iters} iterations")]
    ProxNonConvergence { residual: f64, iters: usize },

    #[error("loss is not twice differentiable")]
    NotTwiceDifferentiable,

    #[error("E[SY] must be positive (got {0})")]
    MeanNotPositive(f64),

    #[error("fixed-point iteration exhausted its budget (max residual {max_residual:e}); \
             delta may be below the solvable region for this loss")]
    NoConvergence { max_residual: f64 },

    #[error("iterates diverged (alpha={alpha:e}, lambda={lambda:e})")]
    DivergingIterates { alpha: f64, lambda: f64 },

    #[error("sigma={0} is too small for the convolution grid (minimum 1e-3)")]
    SigmaTooSmall(f64),

    #[error("no root of kappa(sigma) = 1/delta found with sigma up to {0}")]
    NoRoot(f64),

    #[error("density of SY is not differentiable on the real line for this model")]
    DensityNotDifferentiable,

    #[error("inner conjugate function failed midpoint convexity on the grid (worst violation {0:e})")]
    NonConvexInner(f64),

    #[error("achievability check failed: {0}")]
    AchievabilityFailed(String),

    #[error("optimizer diverged: objective increased for {0} consecutive steps")]
    OptimizerDiverged(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed tabulated data: {0}")]
    MalformedTable(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
