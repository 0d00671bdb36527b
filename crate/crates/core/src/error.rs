use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("noise level must be positive and finite, got {0}")]
    InvalidSigma(f64),

    #[error("invalid mask ratio {0}: expected 0 <= r < 1")]
    InvalidRatio(f64),

    #[error("patch size {patch} does not divide image dims {height}x{width}")]
    Patchify {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("class label {label} out of range (num_classes = {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("schedule step {step} exceeds total {total}")]
    ScheduleStep { step: usize, total: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("no unmasked tokens left to score")]
    EmptyUnmasked,

    #[error("time must strictly decrease: t_cur = {t_cur}, t_next = {t_next}")]
    TimeOrder { t_cur: f64, t_next: f64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("token count mismatch: {0}")]
    TokenCount(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
