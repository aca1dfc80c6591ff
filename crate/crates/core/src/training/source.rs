//! Where training reads preprocessed pixels from.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::TrainError;
use crate::image;
use crate::manifest::{DatasetManifest, ImageRecord};
use crate::preprocess::{self, PreprocessConfig, ProcessedImage};

/// A preprocessed image scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Sample {
    pub fn from_processed(img: &ProcessedImage) -> Self {
        let max = ((1u32 << img.bit_depth) - 1) as f32;
        Self {
            height: img.height,
            width: img.width,
            data: img.pixels.iter().map(|&p| p as f32 / max).collect(),
        }
    }
}

pub trait ImageSource: Sync {
    fn load(&self, record: &ImageRecord) -> Result<Sample, TrainError>;
}

/// Reads the `<root>/<patient_id>/<image_id>.png` tree written by preprocessing.
#[derive(Debug, Clone)]
pub struct ProcessedDir {
    root: PathBuf,
}

impl ProcessedDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageSource for ProcessedDir {
    fn load(&self, record: &ImageRecord) -> Result<Sample, TrainError> {
        let raw = image::load_image_path(&preprocess::processed_png_path(&self.root, record))?;
        let max = raw.max_value() as f32;
        Ok(Sample {
            height: raw.height,
            width: raw.width,
            data: raw.pixels.iter().map(|&p| p as f32 / max).collect(),
        })
    }
}

/// Preprocessed images held in memory, keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, Sample>,
}

impl MemorySource {
    pub fn insert(&mut self, image_id: impl Into<String>, sample: Sample) {
        self.images.insert(image_id.into(), sample);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Runs the preprocessing chain over every manifest record.
    pub fn preprocess(
        manifest: &DatasetManifest,
        image_root: Option<&Path>,
        config: &PreprocessConfig,
    ) -> Result<Self, TrainError> {
        let mut out = Self::default();
        for r in manifest.records() {
            let img = preprocess::preprocess_image(r, image_root, config, None)?;
            out.insert(r.image_id.clone(), Sample::from_processed(&img));
        }
        Ok(out)
    }
}

impl ImageSource for MemorySource {
    fn load(&self, record: &ImageRecord) -> Result<Sample, TrainError> {
        self.images
            .get(&record.image_id)
            .cloned()
            .ok_or_else(|| TrainError::MissingImage(record.image_id.clone()))
    }
}
