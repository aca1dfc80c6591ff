//! Fold training loop, out-of-fold prediction, and the k-fold driver.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mammo_nn::{Classifier, ModelConfig, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::FoldSplit;
use super::optim::{bce_soft_loss, bce_soft_loss_grad, cosine_lr, Sgd};
use super::sampler::{build_epoch_plan, SamplerConfig};
use super::source::{ImageSource, Sample};
use super::TrainError;
use crate::evaluate::{write_image_predictions, ImagePrediction};
use crate::manifest::{DatasetManifest, ImageRecord};
use crate::mix_seed;

const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub soft_positive: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-5,
            momentum: 0.9,
            epochs: 5,
            soft_positive: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.soft_positive > 0.5 && self.soft_positive <= 1.0) {
            return bad("soft_positive must lie in (0.5, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub fold: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_history: Vec<f64>,
    pub batches_per_epoch: usize,
    pub train_images: usize,
    pub validation_images: usize,
}

/// Batch decoding runs on the global rayon pool when `parallel` is set,
/// otherwise on the caller's thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoaderOptions {
    pub parallel: bool,
}

/// Refuses to read any validation-fold patient and records every id read.
struct LeakageGuard<'a> {
    inner: &'a dyn ImageSource,
    forbidden: HashSet<&'a str>,
    read: Mutex<BTreeSet<String>>,
}

impl LeakageGuard<'_> {
    fn load(&self, record: &ImageRecord) -> Result<Sample, TrainError> {
        if self.forbidden.contains(record.patient_id.as_str()) {
            return Err(TrainError::Leakage(record.image_id.clone()));
        }
        self.read
            .lock()
            .expect("guard lock")
            .insert(record.image_id.clone());
        self.inner.load(record)
    }
}

fn load_all(
    records: &[&ImageRecord],
    load: &(dyn Fn(&ImageRecord) -> Result<Sample, TrainError> + Sync),
    loader: LoaderOptions,
) -> Result<Vec<Sample>, TrainError> {
    if !loader.parallel {
        records.iter().map(|r| load(r)).collect()
    } else {
        records.par_iter().map(|r| load(r)).collect()
    }
}

/// Stacks samples into an NCHW batch, mapping `[0, 1]` to `[-1, 1]`.
pub fn stack_batch(samples: &[Sample]) -> Result<Tensor, TrainError> {
    let first = samples
        .first()
        .ok_or_else(|| TrainError::InvalidConfig("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(TrainError::InvalidConfig(format!(
                "mixed image sizes in one batch: {h}x{w} and {}x{}",
                s.height, s.width
            )));
        }
        data.extend(s.data.iter().map(|v| v * 2.0 - 1.0));
    }
    Ok(Tensor::from_nchw([samples.len(), 1, h, w], &data)?)
}

/// Trains on every fold except `fold_id`.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    manifest: &DatasetManifest,
    folds: &FoldSplit,
    fold_id: usize,
    model_config: &ModelConfig,
    train: &TrainConfig,
    sampler: &SamplerConfig,
    source: &dyn ImageSource,
    loader: LoaderOptions,
) -> Result<(Classifier, TrainState), TrainError> {
    folds.check_fold(fold_id)?;
    train.validate()?;
    sampler.validate()?;
    let train_records: Vec<&ImageRecord> = manifest
        .records()
        .iter()
        .filter(|r| folds.fold_of(&r.patient_id).is_some_and(|f| f != fold_id))
        .collect();
    let val_records: Vec<&ImageRecord> = manifest
        .records()
        .iter()
        .filter(|r| folds.in_fold(r, fold_id))
        .collect();
    let guard = LeakageGuard {
        inner: source,
        forbidden: folds.patients_in(fold_id).into_iter().collect(),
        read: Mutex::new(BTreeSet::new()),
    };
    let n_neg = train_records.iter().filter(|r| !r.cancer).count();
    let batches_per_epoch = sampler.batches_per_epoch(n_neg);
    let total_steps = train.epochs * batches_per_epoch;
    let mut model = Classifier::build(model_config, mix_seed(train.seed, fold_id as u64))?;
    model.train();
    let mut sgd = Sgd::new(train.momentum, train.weight_decay);
    let mut state = TrainState {
        fold: fold_id,
        epoch: 0,
        step: 0,
        lr: train.lr_max,
        loss_history: Vec::with_capacity(train.epochs),
        batches_per_epoch,
        train_images: train_records.len(),
        validation_images: val_records.len(),
    };
    let by_id: std::collections::HashMap<&str, &ImageRecord> = train_records
        .iter()
        .map(|r| (r.image_id.as_str(), *r))
        .collect();
    let load = |r: &ImageRecord| guard.load(r);

    for epoch in 0..train.epochs {
        let plan = build_epoch_plan(
            &train_records,
            sampler,
            mix_seed(fold_id as u64, epoch as u64),
        )?;
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for batch_ids in &plan.batches {
            let batch: Vec<&ImageRecord> = batch_ids.iter().map(|id| by_id[id.as_str()]).collect();
            let samples = load_all(&batch, &load, loader)?;
            let x = stack_batch(&samples)?;
            let labels: Vec<u8> = batch.iter().map(|r| r.label()).collect();
            model.zero_grad();
            let logits: Vec<f64> = model.forward(&x)?.into_iter().map(f64::from).collect();
            let loss = bce_soft_loss(&logits, &labels, train.soft_positive);
            let grad: Vec<f32> = bce_soft_loss_grad(&logits, &labels, train.soft_positive)
                .into_iter()
                .map(|g| g as f32)
                .collect();
            model.backward(&grad)?;
            state.lr = cosine_lr(state.step, total_steps, train.lr_max, train.lr_min);
            sgd.step(model.params_mut(), state.lr);
            state.step += 1;
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
        }
        let mean = loss_sum / seen.max(1) as f64;
        if !mean.is_finite() {
            return Err(TrainError::DivergedLoss {
                fold: fold_id,
                epoch,
            });
        }
        log::info!(
            "{} fold {fold_id} epoch {}/{}: loss {mean:.5} lr {:.3e}",
            model_config.arch,
            epoch + 1,
            train.epochs,
            state.lr
        );
        state.loss_history.push(mean);
        state.epoch = epoch + 1;
    }
    model.eval();
    let read = guard.read.into_inner().expect("guard lock");
    if let Some(id) = val_records.iter().find(|r| read.contains(&r.image_id)) {
        return Err(TrainError::Leakage(id.image_id.clone()));
    }
    Ok((model, state))
}

/// Eval-mode probabilities for `records`, in order.
pub fn predict_records(
    model: &Classifier,
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    loader: LoaderOptions,
) -> Result<Vec<f64>, TrainError> {
    predict_with(records, source, loader, |x| Ok(model.predict_proba(x)?))
}

/// Mean probability of several fold models.
pub fn ensemble_predict(
    models: &[Classifier],
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    loader: LoaderOptions,
) -> Result<Vec<f64>, TrainError> {
    predict_with(records, source, loader, |x| {
        Ok(mammo_nn::ensemble_proba(models, x)?)
    })
}

fn predict_with(
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    loader: LoaderOptions,
    f: impl Fn(&Tensor) -> Result<Vec<f32>, TrainError>,
) -> Result<Vec<f64>, TrainError> {
    let load = |r: &ImageRecord| source.load(r);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let samples = load_all(chunk, &load, loader)?;
        out.extend(f(&stack_batch(&samples)?)?.into_iter().map(f64::from));
    }
    Ok(out)
}

/// Trained fold model with its history and out-of-fold predictions.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub model: Classifier,
    pub state: TrainState,
    pub predictions: Vec<ImagePrediction>,
}

pub fn checkpoint_name(model_config: &ModelConfig, fold: usize) -> String {
    format!("{}_fold{fold}.ckpt", model_config.arch)
}

pub fn oof_name(model_config: &ModelConfig, fold: usize) -> String {
    format!("{}_fold{fold}_oof.csv", model_config.arch)
}

pub fn history_name(model_config: &ModelConfig, fold: usize) -> String {
    format!("{}_fold{fold}_history.json", model_config.arch)
}

/// Where [`train_all_folds`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct ArtifactDirs {
    pub checkpoints: PathBuf,
    pub predictions: PathBuf,
}

impl ArtifactDirs {
    pub fn under(root: &Path) -> Self {
        Self {
            checkpoints: root.join("checkpoints"),
            predictions: root.join("predictions"),
        }
    }
}

/// Runs [`train_fold`] for each selected fold, then predicts its held-out
/// images. Gradient buffers are released once a fold finishes.
#[allow(clippy::too_many_arguments)]
pub fn train_all_folds(
    manifest: &DatasetManifest,
    folds: &FoldSplit,
    model_config: &ModelConfig,
    train: &TrainConfig,
    sampler: &SamplerConfig,
    source: &dyn ImageSource,
    loader: LoaderOptions,
    only_fold: Option<usize>,
    artifacts: Option<&ArtifactDirs>,
) -> Result<Vec<FoldRun>, TrainError> {
    let selected: Vec<usize> = match only_fold {
        Some(f) => {
            folds.check_fold(f)?;
            vec![f]
        }
        None => (0..folds.k).collect(),
    };
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    if let Some(dirs) = artifacts {
        for d in [&dirs.checkpoints, &dirs.predictions] {
            std::fs::create_dir_all(d).map_err(io(d))?;
        }
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for fold in selected {
        let result = train_fold(
            manifest,
            folds,
            fold,
            model_config,
            train,
            sampler,
            source,
            loader,
        )
        .and_then(|(mut model, state)| {
            model.release_grads();
            let held_out: Vec<&ImageRecord> = manifest
                .records()
                .iter()
                .filter(|r| folds.in_fold(r, fold))
                .collect();
            let probs = predict_records(&model, &held_out, source, loader)?;
            let predictions: Vec<ImagePrediction> = held_out
                .iter()
                .zip(probs)
                .map(|(r, probability)| ImagePrediction {
                    image_id: r.image_id.clone(),
                    patient_id: r.patient_id.clone(),
                    laterality: r.laterality,
                    fold,
                    probability,
                    label: r.label(),
                })
                .collect();
            if let Some(dirs) = artifacts {
                model.save(&dirs.checkpoints.join(checkpoint_name(model_config, fold)))?;
                write_image_predictions(
                    &dirs.predictions.join(oof_name(model_config, fold)),
                    &predictions,
                )?;
                let path = dirs.predictions.join(history_name(model_config, fold));
                let mut text = serde_json::to_string_pretty(&state).expect("state serializes");
                text.push('\n');
                std::fs::write(&path, text).map_err(io(&path))?;
            }
            Ok(FoldRun {
                fold,
                model,
                state,
                predictions,
            })
        });
        match result {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::error!("{} fold {fold} failed: {e}", model_config.arch);
                failures.push((fold, e.to_string()));
            }
        }
    }
    if failures.is_empty() {
        Ok(runs)
    } else {
        Err(TrainError::FoldsFailed(failures))
    }
}
