use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({0}, {1}) lies outside the system domain")]
    DomainError(f64, f64),
    #[error("trajectory left the system domain at t = {0}")]
    DomainExit(f64),
    #[error("hessian not available for nested bracket evaluation")]
    DerivativeUnavailable,
    #[error("f and g are collinear at ({0}, {1}): |det(f,g)| below tolerance")]
    CollinearityDegenerate(f64, f64),
    #[error("det(g,[g,[f,g]]) (resp. its lift) below tolerance: {0}")]
    LegendreDegenerate(f64),
    #[error("adaptive step size underflow at t = {0}")]
    IntegrationFailure(f64),
    #[error("time {0} outside the trajectory span [{1}, {2}]")]
    OutOfSpan(f64, f64, f64),
    #[error("Newton iteration limit reached ({0} iterations, residual {1:.3e})")]
    MaxIterations(usize, f64),
    #[error("line search stalled at residual {0:.3e}")]
    LineSearchStall(f64),
    #[error("shooting Jacobian numerically singular (condition {0:.3e})")]
    SingularJacobian(f64),
    #[error("no sign change of psi - target on the locus parameter interval")]
    NoBracket,
    #[error("continuation corrector diverged at t_b = {0}")]
    CorrectorDiverged(f64),
    #[error("assumption certificate failed: {0}")]
    AssumptionViolated(String),
    #[error("event not found before the horizon t = {0}")]
    EventNotFound(f64),
    #[error("singular control saturated (|psi| > 1) at ({0}, {1})")]
    SingularInadmissible(f64, f64),
    #[error("arc chain discontinuity: state gap {0:.3e} at arc boundary")]
    ChainBroken(f64),
    #[error("model parameter invariant violated: {0}")]
    ParamInvariantViolated(String),
    #[error("xi = (H_g, H_[f,g]) is not a submersion at z_e (singular values {0:.3e}, {1:.3e})")]
    NotSubmersion(f64, f64),
    #[error("derivative direction degenerate (norm below 1e-12)")]
    DegenerateDirection,
    #[error("initial condition outside the classified region: {0}")]
    Unclassified(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
