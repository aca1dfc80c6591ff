use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}` (expected convnext_small or efficientnet_v2_s)")]
    UnknownArchitecture(String),
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint holds `{found}` but `{expected}` was requested")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("backward called without a preceding train-mode forward")]
    NoForwardCache,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
