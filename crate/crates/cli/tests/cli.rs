use std::path::{Path, PathBuf};
use std::process::Command;

use mammo_bench::{metrics_path, report_paths, Artifact, ModelMetrics};
use mammo_core::config::PipelineConfig;
use mammo_core::evaluate::{write_image_predictions, ImagePrediction, Metric};
use mammo_core::manifest::Laterality;
use mammo_core::nn::ArchitectureId;
use mammo_core::training::oof_name;

const BIN: &str = env!("CARGO_BIN_EXE_mammo-bench");

fn run(args: &[&str], config: &Path) -> (i32, String, String) {
    let out = Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Config plus two folds of out-of-fold predictions for both architectures.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[paths]\nmanifest = \"manifest.csv\"\noutput_root = \"out\"\n[folds]\nk = 2\nseed = 1\n",
    )
    .unwrap();
    let cfg = PipelineConfig::load(&config).unwrap();
    for (arch, noise) in [
        (ArchitectureId::ConvnextSmall, 0.1),
        (ArchitectureId::EfficientnetV2S, 1.2),
    ] {
        let model_cfg = cfg.model.model_config(arch);
        for fold in 0..2 {
            let mut rows = Vec::new();
            for p in 0..10 {
                let patient = fold * 10 + p;
                for (side, lat) in [Laterality::L, Laterality::R].into_iter().enumerate() {
                    let label = u8::from(patient % 3 == 0 && side == 0);
                    for view in 0..2 {
                        let jitter = ((patient * 7 + side * 3 + view) % 10) as f64 / 10.0;
                        let probability =
                            (0.25 + 0.5 * label as f64 + noise * (jitter - 0.5)).clamp(0.0, 1.0);
                        rows.push(ImagePrediction {
                            image_id: format!("I{patient}-{side}-{view}"),
                            patient_id: format!("P{patient}"),
                            laterality: lat,
                            fold,
                            probability,
                            label,
                        });
                    }
                }
            }
            let path = cfg.predictions_dir().join(oof_name(&model_cfg, fold));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            write_image_predictions(&path, &rows).unwrap();
        }
    }
    (dir, config)
}

fn metrics(cfg: &PipelineConfig, arch: ArchitectureId) -> Artifact<ModelMetrics> {
    serde_json::from_str(&std::fs::read_to_string(metrics_path(cfg, arch, None)).unwrap()).unwrap()
}

#[test]
fn missing_config_is_a_usage_error_with_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("nope.toml");
    for sub in ["ingest", "preprocess", "train", "evaluate", "report"] {
        let (code, _, err) = run(&[sub], &config);
        assert_eq!(code, 2, "{sub}: {err}");
        assert!(err.contains("nope.toml"), "{sub}: {err}");
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[paths]\nmanifest = \"m.csv\"\n").unwrap();
    assert_eq!(run(&["evaluate"], &config).0, 2);
    std::fs::write(
        &config,
        "[paths]\nmanifest = \"m.csv\"\noutput_root = \"o\"\n[training]\nepochs = 0\n",
    )
    .unwrap();
    assert_eq!(run(&["evaluate"], &config).0, 2);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_subcommand_and_bad_flags_exit_2() {
    let (dir, config) = fixture();
    assert_eq!(run(&["frobnicate"], &config).0, 2);
    assert_eq!(run(&["evaluate", "--arch", "resnet"], &config).0, 2);
    let (code, _, err) = run(&["evaluate", "--fold", "2"], &config);
    assert_eq!(code, 2, "{err}");
    assert!(!dir.path().join("out/metrics").exists());
}

#[test]
fn evaluate_writes_metrics_with_config_echo() {
    let (_dir, config) = fixture();
    let (code, out, err) = run(&["evaluate"], &config);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("convnext_small"), "{out}");
    let cfg = PipelineConfig::load(&config).unwrap();
    let conv = metrics(&cfg, ArchitectureId::ConvnextSmall);
    assert_eq!(conv.config, cfg);
    assert_eq!(conv.body.folds, vec![0, 1]);
    assert_eq!(conv.body.per_fold.len(), 2);
    assert_eq!(conv.body.overall.auc, Metric::Defined(1.0));
    assert_eq!(conv.body.overall.n, 40);
    assert_eq!(conv.body.image_level.n, 80);
    let eff = metrics(&cfg, ArchitectureId::EfficientnetV2S);
    assert!(eff.body.overall.auc.value().unwrap() < 1.0);
}

#[test]
fn threshold_override_is_echoed() {
    let (_dir, config) = fixture();
    assert_eq!(
        run(
            &["evaluate", "--threshold", "0.9", "--arch", "convnext_small"],
            &config
        )
        .0,
        0
    );
    let cfg = PipelineConfig::load(&config).unwrap();
    let m = metrics(&cfg, ArchitectureId::ConvnextSmall);
    assert_eq!(m.config.evaluation.threshold, 0.9);
    assert_eq!(m.config.model.archs, vec![ArchitectureId::ConvnextSmall]);
    assert_eq!(m.body.threshold, 0.9);
    assert_eq!(m.body.overall.recall, Metric::Defined(0.0));
    assert!(!metrics_path(&cfg, ArchitectureId::EfficientnetV2S, None).exists());
}

#[test]
fn single_fold_evaluation_has_its_own_file() {
    let (_dir, config) = fixture();
    assert_eq!(run(&["evaluate", "--fold", "1"], &config).0, 0);
    let cfg = PipelineConfig::load(&config).unwrap();
    let path = metrics_path(&cfg, ArchitectureId::ConvnextSmall, Some(1));
    let m: Artifact<ModelMetrics> =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(m.body.folds, vec![1]);
    assert_eq!(m.body.overall.n, 20);
    assert!(!metrics_path(&cfg, ArchitectureId::ConvnextSmall, None).exists());
}

#[test]
fn evaluate_without_predictions_fails_with_pipeline_error() {
    let (dir, config) = fixture();
    std::fs::remove_dir_all(dir.path().join("out/predictions")).unwrap();
    let (code, _, err) = run(&["evaluate"], &config);
    assert_eq!(code, 1);
    assert!(err.contains("train"), "{err}");
}

#[test]
fn report_ranks_models_and_is_idempotent() {
    let (_dir, config) = fixture();
    assert_eq!(run(&["evaluate"], &config).0, 0);
    let (code, out, err) = run(&["report", "--svg"], &config);
    assert_eq!(code, 0, "{err}");
    let cfg = PipelineConfig::load(&config).unwrap();
    let paths = report_paths(&cfg);
    let text = std::fs::read_to_string(&paths[0]).unwrap();
    let conv = text.find("ConvNeXT-S").unwrap();
    let eff = text.find("EffNetV2-S").unwrap();
    assert!(conv < eff, "{text}");
    assert!(text.contains("Concat. features + NN"), "{text}");
    assert!(out.contains("ConvNeXT-S"));
    let before: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert!(String::from_utf8_lossy(&before[3]).starts_with("<svg"));
    let echo: serde_json::Value = serde_json::from_slice(&before[2]).unwrap();
    let echoed: PipelineConfig = serde_json::from_value(echo["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);

    assert_eq!(run(&["report", "--svg"], &config).0, 0);
    let after: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn report_without_metrics_still_lists_fixtures() {
    let (_dir, config) = fixture();
    let (code, _, err) = run(&["report"], &config);
    assert_eq!(code, 0, "{err}");
    let cfg = PipelineConfig::load(&config).unwrap();
    let text = std::fs::read_to_string(&report_paths(&cfg)[0]).unwrap();
    assert!(text.contains("Fine-tuned EfficientNet"), "{text}");
    assert!(!report_paths(&cfg)[3].exists());
}

#[test]
fn help_exits_zero() {
    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["ingest", "preprocess", "train", "evaluate", "report"] {
        assert!(text.contains(sub), "{text}");
    }
}
