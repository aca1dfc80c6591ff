//! Pipeline configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::{ArchitectureId, ModelConfig};
use crate::preprocess::PreprocessConfig;
use crate::training::{FoldConfig, SamplerConfig, TrainConfig};

/// Overrides the preprocessed-image cache root.
pub const CACHE_ENV: &str = "MAMMO_BENCH_CACHE";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    /// Root for relative `source_path` entries; defaults to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    pub output_root: PathBuf,
    /// Baseline fixtures for the report; the bundled set is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<PathBuf>,
    /// Preprocessed-image cache; defaults to `<output_root>/preprocessed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub archs: Vec<ArchitectureId>,
    pub dropout_rate: f32,
    pub drop_path_rate: f32,
    pub pretrained: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(ArchitectureId::ConvnextSmall);
        Self {
            archs: ArchitectureId::ALL.to_vec(),
            dropout_rate: base.dropout_rate,
            drop_path_rate: base.drop_path_rate,
            pretrained: false,
            pretrained_weights: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, arch: ArchitectureId) -> ModelConfig {
        ModelConfig {
            dropout_rate: self.dropout_rate,
            drop_path_rate: self.drop_path_rate,
            pretrained: self.pretrained,
            pretrained_weights: self.pretrained_weights.clone(),
            ..ModelConfig::new(arch)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub threshold: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Single worker and in-order loading; byte-identical reruns.
    pub deterministic: bool,
    /// Preprocessing / loading threads when not deterministic (0 = all cores).
    pub workers: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            deterministic: false,
            workers: 0,
        }
    }
}

impl RuntimeConfig {
    pub fn effective_workers(&self) -> usize {
        match (self.deterministic, self.workers) {
            (true, _) => 1,
            (false, 0) => std::thread::available_parallelism().map_or(1, |n| n.get()),
            (false, n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub folds: FoldConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.message().to_string(),
        })
    }

    /// Reads and validates `path`. Relative paths inside the file resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        join(&mut paths.manifest);
        join(&mut paths.output_root);
        for p in [
            &mut paths.image_root,
            &mut paths.baselines,
            &mut paths.cache,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        if let Some(p) = &mut self.model.pretrained_weights {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.paths.manifest.as_os_str().is_empty()
            || self.paths.output_root.as_os_str().is_empty()
        {
            return Err(ConfigError::Invalid(
                "paths.manifest and paths.output_root must be non-empty".into(),
            ));
        }
        if self.model.archs.is_empty() {
            return Err(ConfigError::Invalid(
                "model.archs must list at least one architecture".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(ConfigError::Invalid(format!(
                "evaluation.threshold must be in [0, 1], got {}",
                self.evaluation.threshold
            )));
        }
        if self.folds.k < 2 {
            return Err(ConfigError::Invalid(format!(
                "folds.k must be >= 2, got {}",
                self.folds.k
            )));
        }
        self.preprocess.validate().map_err(|e| invalid(&e))?;
        self.training.validate().map_err(|e| invalid(&e))?;
        self.sampler.validate().map_err(|e| invalid(&e))?;
        for &arch in &self.model.archs {
            self.model
                .model_config(arch)
                .validate()
                .map_err(|e| invalid(&e))?;
        }
        Ok(())
    }

    pub fn image_root(&self) -> PathBuf {
        self.paths.image_root.clone().unwrap_or_else(|| {
            self.paths
                .manifest
                .parent()
                .unwrap_or(Path::new(""))
                .to_path_buf()
        })
    }

    /// `$MAMMO_BENCH_CACHE`, else `paths.cache`, else `<output_root>/preprocessed`.
    pub fn cache_dir(&self) -> PathBuf {
        if let Some(v) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(v);
        }
        self.paths
            .cache
            .clone()
            .unwrap_or_else(|| self.paths.output_root.join("preprocessed"))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.paths.output_root.join("checkpoints")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.paths.output_root.join("predictions")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.paths.output_root.join("metrics")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.output_root.join("report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[paths]\nmanifest = \"m.csv\"\noutput_root = \"out\"\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.preprocess, PreprocessConfig::default());
        assert_eq!(cfg.training, TrainConfig::default());
        assert_eq!(cfg.sampler, SamplerConfig::default());
        assert_eq!(cfg.folds, FoldConfig::default());
        assert_eq!(cfg.model.archs, ArchitectureId::ALL.to_vec());
        assert_eq!(cfg.evaluation.threshold, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}[training]\nlearning_rate = 0.1\n");
        assert!(matches!(
            PipelineConfig::from_toml_str(&text),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn toml_round_trip() {
        let text = format!(
            "{MINIMAL}[model]\narchs = [\"efficientnet_v2_s\"]\ndropout_rate = 0.0\n[sampler]\npositives_per_batch = 3\n"
        );
        let cfg = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.model.archs, vec![ArchitectureId::EfficientnetV2S]);
        assert_eq!(cfg.sampler.positives_per_batch, 3);
        assert_eq!(
            PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/data/run"));
        assert_eq!(cfg.paths.manifest, PathBuf::from("/data/run/m.csv"));
        assert_eq!(cfg.image_root(), PathBuf::from("/data/run"));
        assert_eq!(cfg.report_dir(), PathBuf::from("/data/run/out/report"));
    }

    #[test]
    fn nested_invariants_are_checked() {
        let text = format!("{MINIMAL}[sampler]\nbatch_size = 4\npositives_per_batch = 4\n");
        let cfg = PipelineConfig::from_toml_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let text = format!("{MINIMAL}[model]\narchs = []\n");
        assert!(PipelineConfig::from_toml_str(&text)
            .unwrap()
            .validate()
            .is_err());
    }
}
