use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("empty input to {op}")]
    Empty { op: &'static str },

    #[error("degenerate norm in {op}: nothing to normalize")]
    DegenerateNorm { op: &'static str },

    #[error("fit constraint violated: n_t = {n_t} exceeds l_A - l_B + 1 = {limit} (l_A = {l_a}, l_B = {l_b})")]
    FitConstraint {
        n_t: usize,
        l_a: usize,
        l_b: usize,
        limit: i64,
    },

    #[error("pixel size mismatch: BEV {bev} m vs aerial {aerial} m")]
    PixelSizeMismatch { bev: f64, aerial: f64 },

    #[error("pose grid not aligned with the feature-map lattice: {0}")]
    GridAlignment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("negative pool too small: need {needed}, {available} available after exclusions")]
    PoolTooSmall { needed: usize, available: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("pose ({x:.3}, {y:.3}) too close to the world border")]
    PoseOutOfBounds { x: f64, y: f64 },

    #[error("no groundtruth for query {0}")]
    MissingGroundtruth(u32),

    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
