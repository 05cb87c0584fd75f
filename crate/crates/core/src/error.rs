use thiserror::Error;

/// Errors surfaced by the solvers, the simulator and the configuration layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    #[error("invalid truncation: y_max = {y_max} must exceed ybar1 = {ybar1}")]
    InvalidTruncation { y_max: f64, ybar1: f64 },

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("no crossing of |y| = {level} within horizon {horizon}")]
    HorizonExceeded { level: f64, horizon: f64 },

    #[error("solver did not converge in {max_iter} iterations (residual {residual:.3e})")]
    NoConvergence { max_iter: usize, residual: f64 },

    #[error("zero pivot at row {row} during factorization")]
    SingularMatrix { row: usize },

    #[error("row {row} of the cycle operator has mass {mass} (tolerance {tol:.1e})")]
    NotStochastic { row: usize, mass: f64, tol: f64 },

    #[error("cycle-length normalizer is not positive: {0}")]
    DegenerateDenominator(f64),

    #[error("stationary problem has more than one closed class ({unreachable} nodes cannot reach the reference node)")]
    NullspaceDimension { unreachable: usize },

    #[error("negative density {value:.3e} at node {node} (tolerance {tol:.1e})")]
    NegativeDensity { node: usize, value: f64, tol: f64 },

    #[error("complete problem not solvable: nu(f) = {0}")]
    NotSolvable(f64),

    #[error("field shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
