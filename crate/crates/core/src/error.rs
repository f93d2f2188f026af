use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmpsError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmpsError {
    #[error("K is not Hermitian: defect {defect:.3e} exceeds tolerance {tolerance:.3e}")]
    NonHermitianK { defect: f64, tolerance: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid boundary state: {0}")]
    InvalidBoundaryState(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("negative propagation distance {0}")]
    NegativeDistance(f64),
    #[error("insertion positions are not sorted ascending")]
    UnsortedPositions,
    #[error("position {position} lies outside [0, {length}]")]
    PositionOutOfRange { position: f64, length: f64 },
    #[error("degenerate fixed space: {count} eigenvalues with vanishing real part")]
    DegenerateFixedSpace { count: usize },
    #[error("density vanishes, pair correlation is undefined")]
    ZeroDensity,
    #[error("state is gapless")]
    GaplessState,
    #[error("fewer than two correlator values above the signal floor {0:e}")]
    SignalBelowFloor(f64),
    #[error("lattice step must be positive, got {0}")]
    StepNotPositive(f64),
    #[error("lattice fixed-point residual {0:.3e} exceeds tolerance")]
    WindowTooSmall(f64),
    #[error("invalid field moments: {0}")]
    InvalidMoments(String),
    #[error("time step {dt} exceeds the bound {bound}")]
    StepTooLarge { dt: f64, bound: f64 },
    #[error("trajectory state norm underflowed")]
    NonNormalizableState,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl CmpsError {
    /// Numerical failures (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CmpsError::NoConvergence(_)
                | CmpsError::DegenerateFixedSpace { .. }
                | CmpsError::GaplessState
                | CmpsError::SignalBelowFloor(_)
                | CmpsError::WindowTooSmall(_)
                | CmpsError::NonNormalizableState
                | CmpsError::ZeroDensity
        )
    }
}
