use thiserror::Error;

/// Errors raised by the solvers and the file formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("negative entry {value} at flat index {index}")]
    NegativeEntry { index: usize, value: f64 },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("kernel entry {value} at flat index {index} is not strictly positive")]
    NonPositiveKernel { index: usize, value: f64 },

    #[error("weights must be nonnegative and sum to one (sum = {sum})")]
    WeightNotSimplex { sum: f64 },

    #[error("weight {index} is zero where a strictly positive weight is required")]
    ZeroWeight { index: usize },

    #[error("regularization gamma must be positive, got {0}")]
    NonPositiveGamma(f64),

    #[error("constraint {index} is not affine; use the Dykstra engine")]
    NonAffineConstraint { index: usize },

    #[error("positive target mass {target} on an all-zero slice {index}")]
    InfeasibleZeroSlice { index: usize, target: f64 },

    #[error("total masses differ: {left} vs {right}")]
    MassMismatch { left: f64, right: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("non-finite value in iterate after {iterations} iterations; retry in log-domain mode")]
    NumericalOverflow { iterations: usize },

    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dense tensor of {requested} scalars exceeds the memory guard of {limit}")]
    MemoryGuard { requested: u128, limit: u128 },

    #[error("total mass target {mass} > 0 but the plan has zero mass")]
    ZeroTotalMass { mass: f64 },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("support point {index} is not strictly positive ({value})")]
    NonPositiveSupport { index: usize, value: f64 },

    #[error("argument must be strictly positive, got {0}")]
    NonPositiveArgument(f64),

    #[error("grid too coarse: truncated tail mass {0:.3e}")]
    GridTooCoarse(f64),

    #[error("point {index} lies outside the binning grid")]
    PointOutsideGrid { index: usize },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("ray {ray} of angle {angle} has zero sum on one side of the coupling only")]
    ZeroRaySum { angle: usize, ray: usize },

    #[error("copy {slot} has a zero at flat index {index} under a positive weight")]
    ZeroEntryUnderPositiveWeight { slot: usize, index: usize },

    #[error("constraint slot {slot}: {source}")]
    InSlot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
