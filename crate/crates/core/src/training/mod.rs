//! Patient-grouped k-fold training with positive-upsampling batches,
//! soft-label BCE, and SGD under a cosine schedule.

mod folds;
mod optim;
mod sampler;
mod source;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

pub use folds::{make_folds, FoldConfig, FoldSplit};
pub use optim::{
    bce_minimum, bce_soft_loss, bce_soft_loss_grad, bce_with_logit, cosine_lr, sigmoid, Sgd,
};
pub use sampler::{build_epoch_plan, EpochSamplePlan, SamplerConfig};
pub use source::{ImageSource, MemorySource, ProcessedDir, Sample};
pub use trainer::{
    checkpoint_name, ensemble_predict, history_name, oof_name, predict_records, stack_batch,
    train_all_folds, train_fold, ArtifactDirs, FoldRun, LoaderOptions, TrainConfig, TrainState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{found} patients cannot fill {k} folds")]
    TooFewPatients { found: usize, k: usize },
    #[error("{found} cancer-positive patients cannot stratify {k} folds")]
    TooFewPositives { found: usize, k: usize },
    #[error("fold {fold} is outside [0, {k})")]
    InvalidFold { fold: usize, k: usize },
    #[error("training split has no positive images")]
    NoPositives,
    #[error("training split has no negative images")]
    NoNegatives,
    #[error("fold {fold}: mean loss became non-finite in epoch {epoch}")]
    DivergedLoss { fold: usize, epoch: usize },
    #[error("validation image `{0}` was read during training")]
    Leakage(String),
    #[error("no preprocessed image for `{0}`")]
    MissingImage(String),
    #[error("folds failed: {}", .0.iter().map(|(f, e)| format!("fold {f}: {e}")).collect::<Vec<_>>().join("; "))]
    FoldsFailed(Vec<(usize, String)>),
    #[error(transparent)]
    Model(#[from] mammo_nn::ModelError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
