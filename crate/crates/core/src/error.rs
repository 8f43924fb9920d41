use thiserror::Error;

/// One Newton iterate: parameter, scaled objective value, score max-norm.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceEntry {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Error)]
pub enum McmlError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("model `{0}` has no enumerable support")]
    NoOracle(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("instrumental density does not dominate the model: {0}")]
    Domination(String),

    #[error("all importance weights underflowed")]
    NumericalUnderflow,

    #[error(
        "Newton iterations did not converge after {iterations} steps (|grad| = {grad_norm:e})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        trace: Vec<TraceEntry>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("Hessian estimate is singular")]
    SingularHessian,

    #[error("covariance is singular or not positive definite")]
    SingularCovariance,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl McmlError {
    /// Input problems (bad files, bad configs, domain violations) versus
    /// failures of the estimation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            McmlError::Domain(_)
                | McmlError::Dimension { .. }
                | McmlError::NoOracle(_)
                | McmlError::Config(_)
                | McmlError::Parse { .. }
                | McmlError::Io(_)
                | McmlError::Domination(_)
        )
    }
}

pub type Result<T, E = McmlError> = std::result::Result<T, E>;
