use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the solvers and the verification lab.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite entry at position {index}")]
    NonFinite { index: usize },

    #[error("matrix is singular to working precision (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("non-positive curvature along search direction (p'Hp = {curvature:e})")]
    CurvatureBreakdown { curvature: f64 },

    #[error("CG breakdown: previous gradient norm squared {gnorm2_prev:e} is zero")]
    CgBreakdown { gnorm2_prev: f64 },

    #[error("invalid update scheme: {0}")]
    InvalidScheme(String),

    #[error("update scheme broke down at iteration {k}: {reason}")]
    SchemeBreakdown { k: usize, reason: String },

    #[error("SR1 update is degenerate (theta_prev = {theta_prev}, denominator {denominator:e})")]
    Sr1Degenerate { theta_prev: f64, denominator: f64 },

    #[error("target delta {delta} coincides with the degenerate value {delta_hat}")]
    DegenerateDelta { delta: f64, delta_hat: f64 },

    #[error("Broyden parameter {phi} coincides with the degenerate value {phi_hat}")]
    DegeneratePhi { phi: f64, phi_hat: f64 },

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("gradient is not orthogonal to previous direction (relative residual {residual:e})")]
    OrthogonalityViolated { residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("malformed problem file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
