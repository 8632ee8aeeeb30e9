use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("radial function must be positive (node {node}: {value})")]
    NonPositiveRadius { node: usize, value: f64 },
    #[error("kernel is singular at coincident nodes {0}")]
    Singularity(usize),
    #[error("degenerate parametrization: image separation ratio {ratio:.3e} below {min:.1e}")]
    Degenerate { ratio: f64, min: f64 },
    #[error("operation requires {expected} topology")]
    Topology { expected: &'static str },
    #[error("node {0} is not a boundary node")]
    NotBoundary(usize),
    #[error("boundary Newton solve did not converge at node {node} (residual {residual:.3e})")]
    BoundaryNewton { node: usize, residual: f64 },
    #[error("fixed-point iteration did not converge after {iterations} iterations (change {change:.3e})")]
    PicardNonConvergence { iterations: usize, change: f64 },
    #[error("extinction: minimum radius {min_radius:.4} fell below {threshold}")]
    Extinction { min_radius: f64, threshold: f64 },
    #[error("singular linear system")]
    SingularSystem,
}

pub type Result<T> = std::result::Result<T, FlowError>;
