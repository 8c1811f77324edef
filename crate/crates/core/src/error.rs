use thiserror::Error;

#[derive(Debug, Error)]
pub enum KamError {
    #[error("center mismatch: {left:?} vs {right:?}")]
    CenterMismatch { left: Vec<f64>, right: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot differentiate a degree-0 action polynomial")]
    DegreeZeroDerivative,

    #[error("mode order {order} exceeds cutoff {cutoff}")]
    CutoffExceeded { order: u32, cutoff: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("schedule rejected: {0}")]
    ScheduleRejected(String),

    #[error("small divisor at k={k:?}, l={l}: |divisor| = {value:e} below bound {bound:e}")]
    SmallDivisor { k: Vec<i32>, l: i64, value: f64, bound: f64 },

    #[error("step too large: {0}")]
    StepTooLarge(String),

    #[error("norm bound {id} violated: {value:e} > {bound:e}")]
    NormBlowup { id: String, value: f64, bound: f64 },

    #[error("anchor lost: {0}")]
    AnchorLost(String),

    #[error("grid too coarse: highest-mode content {hi:e} relative to {total:e}")]
    GridTooCoarse { hi: f64, total: f64 },

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("decomposition schedule too short: mode with |xi|={xi} still outside the plateau")]
    ScheduleTooShort { xi: f64 },

    #[error("insufficient winding: {0}")]
    InsufficientWinding(String),

    #[error("{phase} step {step}: {source}")]
    InStep {
        phase: String,
        step: usize,
        #[source]
        source: Box<KamError>,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KamError>;

impl KamError {
    pub fn in_step(self, phase: &str, step: usize) -> KamError {
        KamError::InStep { phase: phase.to_string(), step, source: Box::new(self) }
    }

    /// Process exit code for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            KamError::Config(_) | KamError::InvalidParameter(_) => 2,
            KamError::Io(_) | KamError::Json(_) => 3,
            KamError::ScheduleRejected(_) | KamError::ScheduleTooShort { .. } => 4,
            KamError::CenterMismatch { .. }
            | KamError::DimensionMismatch { .. }
            | KamError::DegreeZeroDerivative
            | KamError::CutoffExceeded { .. } => 5,
            KamError::SmallDivisor { .. } => 10,
            KamError::StepTooLarge(_) => 11,
            KamError::NormBlowup { .. } => 12,
            KamError::AnchorLost(_) => 13,
            KamError::GridTooCoarse { .. } => 14,
            KamError::QuadratureNonConvergence(_) => 15,
            KamError::InsufficientWinding(_) => 16,
            KamError::InStep { source, .. } => source.exit_code(),
        }
    }
}
