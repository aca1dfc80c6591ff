//! Config-driven pipeline driver: ingest, preprocess, train, evaluate, report.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser};
use serde::{Deserialize, Serialize};

use mammo_core::config::{ConfigError, PipelineConfig};
use mammo_core::evaluate::{
    aggregate_per_breast, evaluate_predictions, image_level, read_image_predictions,
    write_image_predictions, EvalError, ImagePrediction, MetricReport,
};
use mammo_core::manifest::{
    dataset_summary, load_manifest, DatasetManifest, DatasetSummary, ManifestError,
};
use mammo_core::mix_seed;
use mammo_core::nn::{ArchitectureId, ModelError};
use mammo_core::preprocess::{preprocess_manifest, PreprocessConfig, PreprocessError};
use mammo_core::report::{
    bundled_baselines, load_baselines, render_comparison, render_svg, ReportError,
};
use mammo_core::training::{
    checkpoint_name, history_name, make_folds, oof_name, train_all_folds, FoldSplit, LoaderOptions,
    ProcessedDir, TrainError, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PIPELINE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Marker written next to the preprocessed tree; a mismatch triggers a rebuild.
const CACHE_STAMP: &str = "preprocess.json";

#[derive(Debug, Parser)]
#[command(
    name = "mammo-bench",
    version,
    about = "Screening-mammography classification pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Clone, PartialEq, clap::Subcommand)]
pub enum CliCommand {
    /// Validate the manifest and write dataset statistics.
    Ingest(Flags),
    /// Run the image preprocessing chain into the cache directory.
    Preprocess(Flags),
    /// Cross-validated training; writes checkpoints and out-of-fold predictions.
    Train(Flags),
    /// Compute per-model metrics from out-of-fold predictions.
    Evaluate(Flags),
    /// Render the comparison table and chart data.
    Report(Flags),
}

impl CliCommand {
    fn split(self) -> (Subcommand, Flags) {
        match self {
            Self::Ingest(f) => (Subcommand::Ingest, f),
            Self::Preprocess(f) => (Subcommand::Preprocess, f),
            Self::Train(f) => (Subcommand::Train, f),
            Self::Evaluate(f) => (Subcommand::Evaluate, f),
            Self::Report(f) => (Subcommand::Report, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct Flags {
    /// Pipeline configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Args)]
pub struct Overrides {
    /// Restrict to one architecture (convnext_small | efficientnet_v2_s).
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<ArchitectureId>,
    /// Restrict training / evaluation to one fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Decision threshold for threshold metrics.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Single worker, in-order loading, byte-identical reruns.
    #[arg(long)]
    pub deterministic: bool,
    /// Also write an SVG bar chart (report).
    #[arg(long)]
    pub svg: bool,
}

fn parse_arch(s: &str) -> Result<ArchitectureId, String> {
    s.parse::<ArchitectureId>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Ingest,
    Preprocess,
    Train,
    Evaluate,
    Report,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Missing(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => EXIT_USAGE,
            _ => EXIT_PIPELINE,
        }
    }
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// process exit status. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (sub, flags) = cli.command.split();
    match cmd_run(sub, &flags.config, &flags.overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

/// Loads the config, applies flag overrides, and runs one pipeline stage.
pub fn cmd_run(sub: Subcommand, config_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let cfg = effective_config(config_path, overrides)?;
    match sub {
        Subcommand::Ingest => ingest(&cfg).map(|_| ()),
        Subcommand::Preprocess => preprocess(&cfg, true).map(|_| ()),
        Subcommand::Train => train(&cfg, overrides.fold),
        Subcommand::Evaluate => evaluate(&cfg, overrides.fold),
        Subcommand::Report => report(&cfg, overrides.svg),
    }
}

/// The config after flag overrides; this is what artifacts echo.
pub fn effective_config(
    config_path: &Path,
    overrides: &Overrides,
) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::load(config_path)?;
    if let Some(arch) = overrides.arch {
        cfg.model.archs = vec![arch];
    }
    if let Some(t) = overrides.threshold {
        cfg.evaluation.threshold = t;
    }
    if overrides.deterministic {
        cfg.runtime.deterministic = true;
    }
    cfg.validate()?;
    if let Some(f) = overrides.fold.filter(|&f| f >= cfg.folds.k) {
        return Err(CliError::Usage(format!(
            "--fold {f} is out of range for {} folds",
            cfg.folds.k
        )));
    }
    Ok(cfg)
}

/// JSON artifact body with the effective config echoed first.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: PipelineConfig,
    #[serde(flatten)]
    pub body: T,
}

fn write_json<T: Serialize>(path: &Path, cfg: &PipelineConfig, body: &T) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Out<'a, T> {
        config: &'a PipelineConfig,
        #[serde(flatten)]
        body: &'a T,
    }
    write_plain_json(path, &Out { config: cfg, body })
}

fn write_plain_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn summary_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.output_root.join("summary.json")
}

pub fn folds_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.output_root.join("folds.json")
}

pub fn metrics_path(cfg: &PipelineConfig, arch: ArchitectureId, fold: Option<usize>) -> PathBuf {
    let name = match fold {
        Some(f) => format!("{arch}_fold{f}.json"),
        None => format!("{arch}.json"),
    };
    cfg.metrics_dir().join(name)
}

fn ingest(cfg: &PipelineConfig) -> Result<(DatasetManifest, DatasetSummary), CliError> {
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let summary = dataset_summary(&manifest);
    write_json(&summary_path(cfg), cfg, &summary)?;
    println!(
        "{} images from {} patients ({} with cancer) -> {}",
        summary.n_images,
        summary.n_patients,
        summary.n_cancer_patients,
        summary_path(cfg).display()
    );
    Ok((manifest, summary))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct CacheStamp {
    preprocess: PreprocessConfig,
    image_root: PathBuf,
    images: usize,
    fingerprint: u64,
}

fn manifest_fingerprint(manifest: &DatasetManifest) -> u64 {
    let mut h = 0u64;
    for r in manifest.records() {
        let key = format!(
            "{}\u{1f}{}\u{1f}{}",
            r.image_id,
            r.patient_id,
            r.source_path.display()
        );
        for b in key.bytes() {
            h = mix_seed(h, b as u64);
        }
    }
    h
}

/// Preprocesses every manifest image into the cache. With `force` unset, an
/// up-to-date cache (matching stamp) is reused.
fn preprocess(cfg: &PipelineConfig, force: bool) -> Result<DatasetManifest, CliError> {
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let cache = cfg.cache_dir();
    let image_root = cfg.image_root();
    let stamp = CacheStamp {
        preprocess: cfg.preprocess.clone(),
        image_root: image_root.clone(),
        images: manifest.len(),
        fingerprint: manifest_fingerprint(&manifest),
    };
    let stamp_path = cache.join(CACHE_STAMP);
    if !force && read_json::<CacheStamp>(&stamp_path).is_ok_and(|s| s == stamp) {
        log::info!("preprocessed cache {} is up to date", cache.display());
        return Ok(manifest);
    }
    let workers = cfg.runtime.effective_workers();
    let sidecars = preprocess_manifest(
        &manifest,
        Some(&image_root),
        &cache,
        &cfg.preprocess,
        None,
        workers,
    )?;
    let fallbacks = sidecars
        .iter()
        .filter(|s| s.roi.source == mammo_core::preprocess::RoiSource::FullFrameFallback)
        .count();
    write_plain_json(&stamp_path, &stamp)?;
    println!(
        "preprocessed {} images into {} ({fallbacks} full-frame fallbacks)",
        sidecars.len(),
        cache.display()
    );
    Ok(manifest)
}

#[derive(Serialize)]
struct FoldsBody<'a> {
    k: usize,
    seed: u64,
    assignments: &'a std::collections::BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
pub struct HistoryBody {
    pub arch: ArchitectureId,
    pub state: TrainState,
}

fn train(cfg: &PipelineConfig, only_fold: Option<usize>) -> Result<(), CliError> {
    let manifest = preprocess(cfg, false)?;
    let folds: FoldSplit = make_folds(&manifest, cfg.folds.k, cfg.folds.seed)?;
    write_json(
        &folds_path(cfg),
        cfg,
        &FoldsBody {
            k: folds.k,
            seed: cfg.folds.seed,
            assignments: &folds.assignments,
        },
    )?;
    let source = ProcessedDir::new(cfg.cache_dir());
    let loader = LoaderOptions {
        parallel: !cfg.runtime.deterministic,
    };
    let selected: Vec<usize> = match only_fold {
        Some(f) => vec![f],
        None => (0..folds.k).collect(),
    };
    let mut failures = Vec::new();
    for &arch in &cfg.model.archs {
        let model_cfg = cfg.model.model_config(arch);
        for &fold in &selected {
            let runs = train_all_folds(
                &manifest,
                &folds,
                &model_cfg,
                &cfg.training,
                &cfg.sampler,
                &source,
                loader,
                Some(fold),
                None,
            );
            let run = match runs {
                Ok(mut runs) => runs.remove(0),
                Err(e) => {
                    log::error!("{arch} fold {fold}: {e}");
                    failures.push(format!("{arch} fold {fold}: {e}"));
                    continue;
                }
            };
            let (ckpt_dir, pred_dir) = (cfg.checkpoints_dir(), cfg.predictions_dir());
            for dir in [&ckpt_dir, &pred_dir] {
                std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
                    path: dir.clone(),
                    source,
                })?;
            }
            run.model
                .save(&ckpt_dir.join(checkpoint_name(&model_cfg, fold)))?;
            write_image_predictions(&pred_dir.join(oof_name(&model_cfg, fold)), &run.predictions)?;
            write_json(
                &pred_dir.join(history_name(&model_cfg, fold)),
                cfg,
                &HistoryBody {
                    arch,
                    state: run.state.clone(),
                },
            )?;
            println!(
                "{arch} fold {fold}: loss {} -> {}",
                fmt_loss(run.state.loss_history.first()),
                fmt_loss(run.state.loss_history.last())
            );
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Missing(format!(
            "training failed: {}",
            failures.join("; ")
        )))
    }
}

fn fmt_loss(v: Option<&f64>) -> String {
    v.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub report: MetricReport,
}

/// Metrics for one architecture. `overall` and `per_fold` are per breast
/// (mean probability over its images); `image_level` scores every image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub arch: ArchitectureId,
    pub model: String,
    pub threshold: f64,
    pub folds: Vec<usize>,
    pub overall: MetricReport,
    pub per_fold: Vec<FoldReport>,
    pub image_level: MetricReport,
}

/// Reads the out-of-fold files of `folds`, in fold order.
pub fn read_oof(
    cfg: &PipelineConfig,
    arch: ArchitectureId,
    folds: &[usize],
) -> Result<Vec<ImagePrediction>, CliError> {
    let model_cfg = cfg.model.model_config(arch);
    let mut rows = Vec::new();
    for &f in folds {
        let path = cfg.predictions_dir().join(oof_name(&model_cfg, f));
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "missing predictions {} (run `train` first)",
                path.display()
            )));
        }
        rows.extend(read_image_predictions(&path)?);
    }
    Ok(rows)
}

pub fn metrics_for(
    rows: &[ImagePrediction],
    arch: ArchitectureId,
    folds: &[usize],
    threshold: f64,
) -> Result<ModelMetrics, CliError> {
    let overall = evaluate_predictions(&aggregate_per_breast(rows), threshold)?;
    let image = evaluate_predictions(&image_level(rows)?, threshold)?;
    let mut per_fold = Vec::new();
    for &fold in folds {
        let subset: Vec<ImagePrediction> =
            rows.iter().filter(|r| r.fold == fold).cloned().collect();
        per_fold.push(FoldReport {
            fold,
            report: evaluate_predictions(&aggregate_per_breast(&subset), threshold)?,
        });
    }
    Ok(ModelMetrics {
        arch,
        model: arch.display_name().to_string(),
        threshold,
        folds: folds.to_vec(),
        overall,
        per_fold,
        image_level: image,
    })
}

fn evaluate(cfg: &PipelineConfig, only_fold: Option<usize>) -> Result<(), CliError> {
    let folds: Vec<usize> = match only_fold {
        Some(f) => vec![f],
        None => (0..cfg.folds.k).collect(),
    };
    for &arch in &cfg.model.archs {
        let rows = read_oof(cfg, arch, &folds)?;
        let metrics = metrics_for(&rows, arch, &folds, cfg.evaluation.threshold)?;
        let path = metrics_path(cfg, arch, only_fold);
        write_json(&path, cfg, &metrics)?;
        let o = &metrics.overall;
        println!(
            "{arch}: per-breast AUC {} F-score {} accuracy {} (image-level AUC {}) -> {}",
            o.auc,
            o.f1,
            o.accuracy,
            metrics.image_level.auc,
            path.display()
        );
    }
    Ok(())
}

pub fn report_paths(cfg: &PipelineConfig) -> [PathBuf; 4] {
    let dir = cfg.report_dir();
    [
        dir.join("comparison.txt"),
        dir.join("comparison.json"),
        dir.join("chart_data.json"),
        dir.join("chart.svg"),
    ]
}

fn report(cfg: &PipelineConfig, svg: bool) -> Result<(), CliError> {
    let mut measured = Vec::new();
    for &arch in &cfg.model.archs {
        let path = metrics_path(cfg, arch, None);
        if !path.exists() {
            log::warn!(
                "no metrics for {arch} at {} (run `evaluate`); skipped",
                path.display()
            );
            continue;
        }
        let artifact: Artifact<ModelMetrics> = read_json(&path)?;
        measured.push((artifact.body.model.clone(), artifact.body.overall.values()));
    }
    let fixtures = match &cfg.paths.baselines {
        Some(p) => load_baselines(p)?,
        None => bundled_baselines(),
    };
    let comparison = render_comparison(&measured, &fixtures);
    let text = comparison.render_text();
    let [txt, json, chart, svg_path] = report_paths(cfg);
    write_file(&txt, text.as_bytes())?;
    #[derive(Serialize)]
    struct ComparisonBody<'a> {
        table: &'a mammo_core::evaluate::ComparisonTable,
        fixtures: &'a [mammo_core::report::BaselineFixture],
        notes: &'a [String],
    }
    write_json(
        &json,
        cfg,
        &ComparisonBody {
            table: &comparison.table,
            fixtures: &comparison.fixtures,
            notes: &comparison.notes,
        },
    )?;
    write_json(&chart, cfg, &comparison.chart)?;
    if svg {
        write_file(&svg_path, render_svg(&comparison.chart).as_bytes())?;
    }
    print!("{text}");
    Ok(())
}
