use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid period matrix: {0}")]
    InvalidPeriodMatrix(String),
    #[error("truncation insufficient: {0}")]
    TruncationInsufficient(String),
    #[error("all Kummer coordinates vanish at the given point")]
    AllCoordinatesVanish,
    #[error("argument {0} lies within the guard radius of a lattice point")]
    PoleAtLatticePoint(String),
    #[error("near-singular input: {0}")]
    NearSingularInput(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("particles collide: {0}")]
    CollisionDetected(String),
    #[error("step rejected: {0}")]
    StepRejected(String),
    #[error("degenerate eigenvalue: {0}")]
    DegenerateEigenvalue(String),
    #[error("square-root branch ambiguity: {0}")]
    BranchAmbiguity(String),
    #[error("zero on the window boundary: {0}")]
    BoundaryZero(String),
    #[error("zero is not simple: {0}")]
    NonSimpleZero(String),
    #[error("zero tracking lost: {0}")]
    TrackingLost(String),
    #[error("insufficient zeros: {0}")]
    InsufficientZeros(String),
    #[error("grid hits the divisor: {0}")]
    GridHitsDivisor(String),
    #[error("theta factor vanishes: {0}")]
    FactorVanishes(String),
    #[error("degenerate fit: {0}")]
    FitDegenerate(String),
    #[error("divisor shift-invariant: {0}")]
    ShiftInvariantDivisor(String),
    #[error("residue obstruction at order {order}: {value:e}")]
    ResidueObstruction { order: usize, value: f64 },
    #[error("denominator hits the theta divisor: {0}")]
    DivisorHit(String),
    #[error("invalid curve datum: {0}")]
    InvalidCurveDatum(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::ConfigInvalid(e.to_string())
    }
}
