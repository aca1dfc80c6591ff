//! CPU implementations of the ConvNeXt-S and EfficientNetV2-S image
//! classifiers with a single-logit max-pool head, including the backward
//! passes needed to train them.

pub mod checkpoint;
mod classifier;
mod convnext;
mod efficientnet;
mod error;
mod layers;
mod ops;
mod param;
mod tensor;

pub use classifier::{
    ensemble_proba, ArchitectureId, Classifier, GlobalPool, Mode, ModelConfig, MIN_INPUT_SIZE,
};
pub use error::{ModelError, Result};
pub use param::{Param, ParamKind};
pub use tensor::Tensor;

/// Logistic function, numerically stable for large |x|.
pub fn sigmoid(x: f32) -> f32 {
    ops::sigmoid(x)
}
