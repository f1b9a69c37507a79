use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoleError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid LoRA rank {rank} for a {d_o}x{d_i} layer")]
    InvalidRank { rank: usize, d_i: usize, d_o: usize },

    #[error("sequence of length {len} exceeds max context {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("expert {expert} received {tokens} tokens, over capacity {capacity}")]
    CapacityExceeded {
        expert: usize,
        tokens: usize,
        capacity: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("step {step} out of range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("model has no MoE layers")]
    NoMoeLayers,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, MoleError>;
