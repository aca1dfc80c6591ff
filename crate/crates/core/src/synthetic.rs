//! Synthetic mammography-like fixtures for tests, demos, and smoke runs.
//!
//! Each image is a noisy half-ellipse of "tissue" against dark air, anchored
//! to the chest-wall edge given by laterality. Any image may carry a faint,
//! diffuse density; positives add a compact bright Gaussian lesion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelSection, PathsConfig, PipelineConfig};
use crate::image::{dicom, write_png, Photometric, RawImage};
use crate::manifest::{
    write_manifest, DatasetManifest, ImageRecord, Laterality, ManifestError, View,
};
use crate::mix_seed;
use crate::preprocess::PreprocessConfig;
use crate::training::{FoldConfig, SamplerConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    /// Patients with one affected breast (both views positive).
    pub n_cancer_patients: usize,
    pub size: usize,
    /// Stored bit depth of DICOM images; PNG images are always 16-bit.
    pub bit_depth: u8,
    /// Every n-th image is written as MONOCHROME1 DICOM instead of PNG (0 = never).
    pub dicom_every: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 50,
            n_cancer_patients: 25,
            size: 128,
            bit_depth: 12,
            dicom_every: 4,
            seed: 7,
        }
    }
}

const VIEWS: [(Laterality, View); 4] = [
    (Laterality::L, View::Cc),
    (Laterality::L, View::Mlo),
    (Laterality::R, View::Cc),
    (Laterality::R, View::Mlo),
];

/// Renders one square image.
pub fn synthetic_mammogram(
    size: usize,
    bit_depth: u8,
    laterality: Laterality,
    positive: bool,
    seed: u64,
) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = ((1u32 << bit_depth) - 1) as f64;
    let s = size as f64;
    let noise = Normal::new(0.0, 0.015).expect("valid sigma");
    let cy = s * rng.random_range(0.42..0.58);
    let ry = s * rng.random_range(0.36..0.46);
    let rx = s * rng.random_range(0.45..0.7);
    let base = rng.random_range(0.32..0.45);
    // low-frequency fibroglandular texture
    let texture: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                cy + ry * rng.random_range(-0.6..0.6),
                rx * rng.random_range(0.1..0.7),
                s * rng.random_range(0.08..0.16),
                rng.random_range(-0.06..0.08),
            )
        })
        .collect();
    let diffuse = rng.random_bool(0.5).then(|| {
        (
            cy + ry * rng.random_range(-0.4..0.4),
            rx * rng.random_range(0.25..0.6),
            s * rng.random_range(0.07..0.1),
            rng.random_range(0.08..0.12),
        )
    });
    let lesion = positive.then(|| {
        (
            cy + ry * rng.random_range(-0.45..0.45),
            rx * rng.random_range(0.2..0.6),
            s * rng.random_range(0.04..0.055),
            rng.random_range(0.45..0.55),
        )
    });
    let gauss = |r: f64, c: f64, (gy, gx, sigma, amp): (f64, f64, f64, f64)| {
        amp * (-((r - gy).powi(2) + (c - gx).powi(2)) / (2.0 * sigma * sigma)).exp()
    };
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let (r, d) = (row as f64 + 0.5, col as f64 + 0.5);
            // distance from the chest wall, which sits on the laterality side
            let c = match laterality {
                Laterality::L => d,
                Laterality::R => s - d,
            };
            let e = ((r - cy) / ry).powi(2) + (c / rx).powi(2);
            let mut v = if e <= 1.0 {
                let mut t = base * (1.0 - 0.35 * e);
                for &g in &texture {
                    t += gauss(r, c, g);
                }
                if let Some(g) = diffuse {
                    t += gauss(r, c, g);
                }
                if let Some(g) = lesion {
                    t += gauss(r, c, g);
                }
                t + noise.sample(&mut rng)
            } else {
                rng.random_range(0.0..0.02)
            };
            v = v.clamp(0.0, 1.0);
            pixels.push((v * max).round() as u16);
        }
    }
    RawImage::new(size, size, pixels, bit_depth)
}

/// Writes images plus `manifest.csv` into `dir` and returns the manifest.
/// Source paths in the manifest are relative to `dir`.
pub fn generate_dataset(
    dir: &Path,
    spec: &SyntheticSpec,
) -> Result<DatasetManifest, ManifestError> {
    let io = |source| ManifestError::Io {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir.join("images")).map_err(io)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_patients * VIEWS.len());
    for p in 0..spec.n_patients {
        let patient_id = format!("P{p:04}");
        let cancer_side = (p < spec.n_cancer_patients).then(|| {
            if rng.random_bool(0.5) {
                Laterality::L
            } else {
                Laterality::R
            }
        });
        let age = rng.random_bool(0.95).then(|| rng.random_range(40..80));
        for (laterality, view) in VIEWS {
            let index = records.len();
            let image_id = format!("{}", 1_000 + index);
            let positive = cancer_side == Some(laterality);
            let as_dicom = spec.dicom_every > 0 && index % spec.dicom_every == spec.dicom_every - 1;
            // PNG only stores 8 or 16 bits
            let bits = if as_dicom { spec.bit_depth } else { 16 };
            let img = synthetic_mammogram(
                spec.size,
                bits,
                laterality,
                positive,
                mix_seed(spec.seed, index as u64),
            );
            let rel = if as_dicom {
                let rel = format!("images/{image_id}.dcm");
                let mut stored = img;
                stored.invert();
                debug_assert_eq!(stored.photometric, Photometric::Mono1);
                dicom::write(&dir.join(&rel), &stored).map_err(io)?;
                rel
            } else {
                let rel = format!("images/{image_id}.png");
                write_png(&dir.join(&rel), img.height, img.width, &img.pixels, 16).map_err(io)?;
                rel
            };
            records.push(ImageRecord {
                patient_id: patient_id.clone(),
                image_id,
                laterality,
                view,
                age,
                cancer: positive,
                biopsy: positive || rng.random_bool(0.03),
                source_path: rel.into(),
            });
        }
    }
    let manifest = DatasetManifest::from_records(records)?;
    write_manifest(&dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

/// A manifest without image files: `n_patients` patients with 1–4 images
/// each, a `positive_fraction` of them with exactly one positive image.
pub fn synthetic_records(n_patients: usize, positive_fraction: f64, seed: u64) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = (n_patients as f64 * positive_fraction).round() as usize;
    let mut records = Vec::new();
    for p in 0..n_patients {
        let n_images = rng.random_range(1..=4);
        let positive_slot = (p < n_pos).then(|| rng.random_range(0..n_images));
        for i in 0..n_images {
            let (laterality, view) = VIEWS[i];
            records.push(ImageRecord {
                patient_id: format!("S{p:05}"),
                image_id: format!("S{p:05}-{i}"),
                laterality,
                view,
                age: Some(rng.random_range(35..90)),
                cancer: positive_slot == Some(i),
                biopsy: false,
                source_path: Default::default(),
            });
        }
    }
    DatasetManifest::from_records(records).expect("generated ids are unique")
}

/// Desk-scale settings for training from scratch on a [`generate_dataset`]
/// output: 64x32 model input, lr_max 3e-3, 4 positives per batch of 8,
/// no dropout or drop path, deterministic mode.
pub fn smoke_config(dataset_dir: &Path, output_root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        paths: PathsConfig {
            manifest: dataset_dir.join("manifest.csv"),
            image_root: Some(dataset_dir.to_path_buf()),
            output_root: output_root.to_path_buf(),
            baselines: None,
            cache: None,
        },
        preprocess: PreprocessConfig {
            target_height: 64,
            target_width: 32,
            detector_input_size: 64,
            ..Default::default()
        },
        model: ModelSection {
            dropout_rate: 0.0,
            drop_path_rate: 0.0,
            ..Default::default()
        },
        training: TrainConfig {
            lr_max: 3e-3,
            ..Default::default()
        },
        sampler: SamplerConfig {
            positives_per_batch: 4,
            ..Default::default()
        },
        folds: FoldConfig::default(),
        evaluation: Default::default(),
        runtime: Default::default(),
    };
    cfg.runtime.deterministic = true;
    cfg
}
