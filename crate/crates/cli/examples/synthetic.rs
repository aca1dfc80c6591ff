//! Writes a synthetic dataset and a matching smoke-run config.
//!
//! cargo run --release -p mammo-bench --example synthetic -- /tmp/mammo-demo

use std::path::PathBuf;

use mammo_core::synthetic::{generate_dataset, smoke_config, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "mammo-demo".into()),
    );
    let manifest = generate_dataset(&dir.join("data"), &SyntheticSpec::default())?;
    let mut cfg = smoke_config(&PathBuf::from("data"), &PathBuf::from("out"));
    cfg.paths.image_root = Some(PathBuf::from("data"));
    std::fs::write(dir.join("smoke.toml"), cfg.to_toml_string())?;
    println!(
        "{} images in {}; config {}",
        manifest.len(),
        dir.join("data").display(),
        dir.join("smoke.toml").display()
    );
    Ok(())
}
