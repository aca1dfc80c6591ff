use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::convnext::{self, ConvNext};
use crate::efficientnet::{self, EfficientNetV2};
use crate::error::{ModelError, Result};
use crate::layers::{Init, Initializer, MaxPoolHead, TrainCtx};
use crate::ops;
use crate::param::{HasParams, Param};
use crate::tensor::Tensor;

/// Both backbones downsample by 32, so inputs below 32×32 collapse to nothing.
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    ConvnextSmall,
    EfficientnetV2S,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 2] = [
        ArchitectureId::ConvnextSmall,
        ArchitectureId::EfficientnetV2S,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::ConvnextSmall => "convnext_small",
            ArchitectureId::EfficientnetV2S => "efficientnet_v2_s",
        }
    }

    /// Short label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ArchitectureId::ConvnextSmall => "ConvNeXT-S",
            ArchitectureId::EfficientnetV2S => "EffNetV2-S",
        }
    }

    /// Smallest accepted height and width.
    pub fn min_input_size(self) -> usize {
        MIN_INPUT_SIZE
    }

    pub(crate) fn head_name(self) -> &'static str {
        match self {
            ArchitectureId::ConvnextSmall => convnext::HEAD_NAME,
            ArchitectureId::EfficientnetV2S => efficientnet::HEAD_NAME,
        }
    }

    pub(crate) fn stem_weight_name(self) -> &'static str {
        match self {
            ArchitectureId::ConvnextSmall => convnext::STEM_WEIGHT,
            ArchitectureId::EfficientnetV2S => efficientnet::STEM_WEIGHT,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnext_small" => Ok(ArchitectureId::ConvnextSmall),
            "efficientnet_v2_s" => Ok(ArchitectureId::EfficientnetV2S),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalPool {
    #[default]
    Max,
}

fn default_in_channels() -> usize {
    1
}
fn default_dropout() -> f32 {
    0.1
}
fn default_drop_path() -> f32 {
    0.2
}
fn default_outputs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchitectureId,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f32,
    #[serde(default = "default_drop_path")]
    pub drop_path_rate: f32,
    #[serde(default)]
    pub global_pool: GlobalPool,
    #[serde(default)]
    pub pretrained: bool,
    /// Weight container to initialize the backbone from when `pretrained` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
    #[serde(default = "default_outputs")]
    pub num_outputs: usize,
}

impl ModelConfig {
    pub fn new(arch: ArchitectureId) -> Self {
        Self {
            arch,
            in_channels: default_in_channels(),
            dropout_rate: default_dropout(),
            drop_path_rate: default_drop_path(),
            global_pool: GlobalPool::Max,
            pretrained: false,
            pretrained_weights: None,
            num_outputs: default_outputs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_outputs != 1 {
            return bad(format!("num_outputs must be 1, got {}", self.num_outputs));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Backbone {
    ConvNext(ConvNext),
    EfficientNet(EfficientNetV2),
}

impl Backbone {
    fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Backbone::ConvNext(m) => m.infer(x),
            Backbone::EfficientNet(m) => m.infer(x),
        }
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainCtx<'_>) -> Tensor {
        match self {
            Backbone::ConvNext(m) => m.forward(x, ctx),
            Backbone::EfficientNet(m) => m.forward(x, ctx),
        }
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        match self {
            Backbone::ConvNext(m) => m.backward(g),
            Backbone::EfficientNet(m) => m.backward(g),
        }
    }
}

impl HasParams for Backbone {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match self {
            Backbone::ConvNext(m) => m.collect(out),
            Backbone::EfficientNet(m) => m.collect(out),
        }
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Backbone::ConvNext(m) => m.collect_mut(out),
            Backbone::EfficientNet(m) => m.collect_mut(out),
        }
    }
}

/// A binary classifier: backbone → global max pool → dropout → linear → one logit.
///
/// Training mutates the parameters and must be driven by a single owner.
/// [`Classifier::infer`] and [`Classifier::predict_proba`] take `&self` and
/// always run the eval-mode computation, so a trained snapshot can be shared
/// across threads for inference.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ModelConfig,
    backbone: Backbone,
    head: MaxPoolHead,
    mode: Mode,
    rng: ChaCha8Rng,
    frozen_norm_stats: bool,
    has_forward_cache: bool,
}

impl Classifier {
    /// Builds a freshly initialized classifier. `seed` drives both the weight
    /// initialization and the dropout / drop-path sampling stream.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.pretrained && config.pretrained_weights.is_none() {
            return Err(ModelError::WeightsUnavailable(format!(
                "no weight source configured for {}",
                config.arch
            )));
        }
        let mut init = Initializer::seeded(seed);
        let mut model = Self::assemble(config, &mut init);
        model.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d40b);
        if config.pretrained {
            let path = config.pretrained_weights.as_deref().expect("checked above");
            checkpoint::load_backbone_weights(&mut model, path)?;
        }
        Ok(model)
    }

    /// Same structure as [`Classifier::build`] with all-zero parameters.
    pub(crate) fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::assemble(config, &mut Initializer::placeholder()))
    }

    fn assemble(config: &ModelConfig, init: &mut Initializer) -> Self {
        let (backbone, features, head_init) = match config.arch {
            ArchitectureId::ConvnextSmall => (
                Backbone::ConvNext(ConvNext::new(
                    config.in_channels,
                    config.drop_path_rate,
                    init,
                )),
                convnext::FEATURE_CHANNELS,
                Init::TruncNormal(0.02),
            ),
            ArchitectureId::EfficientnetV2S => (
                Backbone::EfficientNet(EfficientNetV2::new(
                    config.in_channels,
                    config.drop_path_rate,
                    init,
                )),
                efficientnet::FEATURE_CHANNELS,
                // U(-1/√in, 1/√in), as for a freshly replaced linear head
                Init::Uniform(1.0 / (efficientnet::FEATURE_CHANNELS as f32).sqrt()),
            ),
        };
        let head = MaxPoolHead::new(
            config.arch.head_name(),
            features,
            config.dropout_rate,
            head_init,
            init,
        );
        Self {
            config: config.clone(),
            backbone,
            head,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            frozen_norm_stats: false,
            has_forward_cache: false,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> ArchitectureId {
        self.config.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn train(&mut self) {
        self.set_mode(Mode::Train);
    }

    pub fn eval(&mut self) {
        self.set_mode(Mode::Eval);
    }

    /// Reseeds the dropout / drop-path stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// When set, batch-normalization layers use their running statistics in
    /// train mode too (and stop updating them).
    pub fn set_frozen_norm_stats(&mut self, frozen: bool) {
        self.frozen_norm_stats = frozen;
    }

    /// All parameters and buffers in a fixed order, backbone first.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.backbone.collect(&mut out);
        self.head.collect(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.backbone.collect_mut(&mut out);
        self.head.collect_mut(&mut out);
        out
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.is_trainable())
            .map(|p| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Frees every gradient buffer (inference-only models need none).
    /// Training resumes after [`Classifier::zero_grad`].
    pub fn release_grads(&mut self) {
        for p in self.params_mut() {
            p.release_grad();
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [n, c, h, w] = batch.shape_nchw();
        let min = self.config.arch.min_input_size();
        if n == 0 {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        if c != self.config.in_channels {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h < min || w < min {
            return Err(ModelError::ShapeMismatch(format!(
                "{} needs inputs of at least {min}x{min}, got {h}x{w}",
                self.config.arch
            )));
        }
        Ok(())
    }

    /// Logits, one per sample (`[B, 1]` flattened to `B` values).
    ///
    /// In train mode the pass samples dropout / drop-path masks and caches
    /// activations for [`Classifier::backward`]; in eval mode it equals
    /// [`Classifier::infer`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<Vec<f32>> {
        self.check_input(batch)?;
        match self.mode {
            Mode::Eval => {
                self.has_forward_cache = false;
                Ok(self.run_eval(batch))
            }
            Mode::Train => {
                let mut ctx = TrainCtx {
                    rng: &mut self.rng,
                    frozen_norm_stats: self.frozen_norm_stats,
                };
                let features = self.backbone.forward(batch, &mut ctx);
                let logits = self.head.forward(&features, &mut ctx);
                self.has_forward_cache = true;
                Ok(logits)
            }
        }
    }

    /// Eval-mode logits; never touches parameters or caches.
    pub fn infer(&self, batch: &Tensor) -> Result<Vec<f32>> {
        self.check_input(batch)?;
        Ok(self.run_eval(batch))
    }

    fn run_eval(&self, batch: &Tensor) -> Vec<f32> {
        self.head.infer(&self.backbone.infer(batch))
    }

    /// Cancer probability per sample: `sigmoid(logit)` of the eval-mode output.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Vec<f32>> {
        Ok(self.infer(batch)?.into_iter().map(ops::sigmoid).collect())
    }

    /// Backpropagates d(loss)/d(logit) through the last train-mode forward,
    /// accumulating into each parameter's `grad`.
    pub fn backward(&mut self, dlogits: &[f32]) -> Result<()> {
        if !self.has_forward_cache {
            return Err(ModelError::NoForwardCache);
        }
        self.has_forward_cache = false;
        if self
            .params()
            .iter()
            .any(|p| p.is_trainable() && p.grad.len() != p.len())
        {
            self.zero_grad();
        }
        let dfeatures = self.head.backward(dlogits);
        self.backbone.backward(&dfeatures);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    /// Loads a checkpoint; with `expected` set, a checkpoint of another
    /// architecture is rejected.
    pub fn load(path: &Path, expected: Option<ArchitectureId>) -> Result<Self> {
        checkpoint::load(path, expected)
    }
}

/// Mean probability of several classifiers.
pub fn ensemble_proba(members: &[Classifier], batch: &Tensor) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; batch.batch()];
    for m in members {
        for (a, p) in acc.iter_mut().zip(m.predict_proba(batch)?) {
            *a += p as f64;
        }
    }
    let k = members.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| (a / k) as f32).collect())
}
