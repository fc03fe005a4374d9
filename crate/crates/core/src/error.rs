use thiserror::Error;

/// Errors raised by the numerical routines of the workbench.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QlabError {
    #[error("metric is not positive definite at ({x}, {y}, {z})")]
    MetricDegenerate { x: f64, y: f64, z: f64 },
    #[error("measure must be positive on the grid")]
    MeasureDegenerate,
    #[error("dilation factor must be positive, got {0}")]
    NonPositiveDilation(f64),
    #[error("outside of the computational domain: {0}")]
    OutOfDomain(String),
    #[error("mask has no interior nodes")]
    EmptyMask,
    #[error("masks overlap")]
    MasksOverlap,
    #[error("condenser plates are not separated by any free node")]
    DegenerateCondenser,
    #[error("not enough in-domain probe samples ({got} < {needed})")]
    ProbeUnderflow { got: usize, needed: usize },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("line search stalled at iteration {iteration}")]
    LineSearchStall { iteration: usize },
    #[error("horizontal coordinate matrix is singular at every radius")]
    MatrixSingular,
    #[error("map does not preserve the horizontal distribution (vertical component {0:e})")]
    ContactViolation(f64),
    #[error("extremal density is not admissible: minimal curve integral {0}")]
    Inadmissible(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o or format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, QlabError>;

impl QlabError {
    /// Variant name, used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            QlabError::MetricDegenerate { .. } => "MetricDegenerate",
            QlabError::MeasureDegenerate => "MeasureDegenerate",
            QlabError::NonPositiveDilation(_) => "NonPositiveDilation",
            QlabError::OutOfDomain(_) => "OutOfDomain",
            QlabError::EmptyMask => "EmptyMask",
            QlabError::MasksOverlap => "MasksOverlap",
            QlabError::DegenerateCondenser => "DegenerateCondenser",
            QlabError::ProbeUnderflow { .. } => "ProbeUnderflow",
            QlabError::NonConvergence { .. } => "NonConvergence",
            QlabError::LineSearchStall { .. } => "LineSearchStall",
            QlabError::MatrixSingular => "MatrixSingular",
            QlabError::ContactViolation(_) => "ContactViolation",
            QlabError::Inadmissible(_) => "Inadmissible",
            QlabError::GridMismatch(_) => "GridMismatch",
            QlabError::InvalidArgument(_) => "InvalidArgument",
            QlabError::Format(_) => "Format",
        }
    }
}
