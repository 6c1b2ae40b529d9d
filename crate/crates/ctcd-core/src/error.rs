use thiserror::Error;

/// Errors surfaced by the engine. Numerical violations (NaN/Inf) fail fast
/// and name the producing operation so a bad run is diagnosable instead of
/// silently poisoning downstream metrics.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("temperature must be positive (got {0})")]
    TemperatureNotPositive(f64),

    #[error("backward requires scalar (loss has {0} elements)")]
    NonScalarLoss(usize),

    #[error("empty mask: batch has no masked positions")]
    EmptyMask,

    #[error("sequence has no maskable positions")]
    NoMaskablePositions,

    #[error("reference must be detached: soft loss reference still carries gradient")]
    ReferenceNotDetached,

    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("step {step} out of range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("missing teacher checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
