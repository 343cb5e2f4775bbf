use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("category {0} has no samples")]
    EmptyCategory(usize),

    #[error("client {0} has an empty view")]
    EmptyClient(usize),

    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,

    #[error("noise intensity {n} exceeds schedule length {t}")]
    IntensityOutOfRange { n: usize, t: usize },

    #[error("timestep out of range: {0}")]
    TimestepOutOfRange(String),

    #[error("schedule/eta inconsistency: negative radicand {0} in DDIM update")]
    NegativeRadicand(f64),

    #[error("training diverged at step {0}")]
    DivergedTraining(usize),

    #[error("sampler diverged at step {0}")]
    SamplerDivergence(usize),

    #[error("empty test view for client {0}")]
    EmptyTestView(usize),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("missing denoiser checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
