//! Coordinate networks with exact reverse-mode gradients.

mod checkpoint;
mod nets;
pub mod tape;

pub use checkpoint::{
    check_compatible, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    CHECKPOINT_VERSION, MAGIC,
};
pub use nets::{
    feature_width, prob_from_head, DeformationNet, Dense, Mlp, NetShape, SceneNets, TransitionNet,
    DEFAULT_BANDS_T, DEFAULT_BANDS_X, DEFAULT_HIDDEN, DEFAULT_W_TRANS, SLOT_STRIDE,
};
pub use tape::{positional_encode, CustomOp, Gradients, Matrix, ParamId, Tape, TapeError, Var};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("invalid layer dims {0:?}")]
    Dims(Vec<usize>),
    #[error("non-finite parameter")]
    NonFinite,
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("w_trans must be finite and at least 1, got {0}")]
    WTrans(f64),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match scene: {0}")]
    Mismatch(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

impl NeuralError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Dims(_) => "ckpt.dims",
            Self::NonFinite => "net.non-finite",
            Self::ParamCount { .. } => "net.param-count",
            Self::WTrans(_) => "net.w-trans",
            Self::Truncated => "ckpt.truncated",
            Self::Magic => "ckpt.magic",
            Self::Version(_) => "ckpt.version",
            Self::Format(_) => "ckpt.format",
            Self::Mismatch(_) => "ckpt.mismatch",
            Self::Io(_) => "ckpt.io",
        }
    }
}
