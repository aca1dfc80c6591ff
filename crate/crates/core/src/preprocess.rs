//! Preprocessing chain: ROI detection and crop, linear VOI windowing,
//! laterality normalization, isotropic rescale with constant padding.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{self, ImageError, RawImage};
use crate::manifest::{DatasetManifest, ImageRecord};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid window: width {0} < 1")]
    InvalidWindow(f64),
    #[error("ROI detector failed: {0}")]
    DetectorFailure(String),
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFunction {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
    #[serde(default)]
    pub function: WindowFunction,
}

impl WindowSpec {
    pub fn linear(center: f64, width: f64) -> Self {
        Self {
            center,
            width,
            function: WindowFunction::Linear,
        }
    }

    /// Window spanning the full range of a `bit_depth`-bit image.
    pub fn full_range(bit_depth: u8) -> Self {
        let levels = (1u64 << bit_depth) as f64;
        Self::linear(levels / 2.0, levels)
    }

    /// Linear VOI mapping of one value onto `[0, out_max]`.
    pub fn map(&self, x: f64, out_max: f64) -> f64 {
        let (c, w) = (self.center, self.width);
        let lower = c - 0.5 - (w - 1.0) / 2.0;
        let upper = c - 0.5 + (w - 1.0) / 2.0;
        if x <= lower {
            0.0
        } else if x > upper {
            out_max
        } else {
            (((x - (c - 0.5)) / (w - 1.0) + 0.5).clamp(0.0, 1.0)) * out_max
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSource {
    RuleBased,
    Learned,
    FullFrameFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub confidence: f64,
    pub source: RoiSource,
}

impl RoiBox {
    pub fn full_frame(height: usize, width: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            w: width,
            h: height,
            confidence: 0.0,
            source: RoiSource::FullFrameFallback,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.h).contains(&row) && (self.x..self.x + self.w).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub detector_input_size: usize,
    pub roi_threshold_fraction: f64,
    pub roi_margin_fraction: f64,
    pub pad_value: u16,
    pub output_bit_depth: u8,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_height: 1024,
            target_width: 512,
            detector_input_size: 416,
            roi_threshold_fraction: 0.05,
            roi_margin_fraction: 0.02,
            pad_value: 0,
            output_bit_depth: 16,
        }
    }
}

impl PreprocessConfig {
    pub const MIN_TARGET: usize = 32;

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidConfig(m));
        if self.target_height < Self::MIN_TARGET || self.target_width < Self::MIN_TARGET {
            return bad(format!("target dims must be >= {}", Self::MIN_TARGET));
        }
        if !(self.roi_threshold_fraction > 0.0 && self.roi_threshold_fraction < 1.0) {
            return bad("roi_threshold_fraction must lie in (0, 1)".into());
        }
        if !(self.roi_margin_fraction >= 0.0) {
            return bad("roi_margin_fraction must be >= 0".into());
        }
        if self.detector_input_size == 0 {
            return bad("detector_input_size must be positive".into());
        }
        if !matches!(self.output_bit_depth, 8 | 16) {
            return bad("output_bit_depth must be 8 or 16".into());
        }
        if u32::from(self.pad_value) > self.out_max() as u32 {
            return bad("pad_value exceeds the output range".into());
        }
        Ok(())
    }

    pub fn out_max(&self) -> f64 {
        ((1u32 << self.output_bit_depth) - 1) as f64
    }
}

/// Row-major single-channel floating-point image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mirrored(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        Self::new(self.height, self.width, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedImage {
    pub height: usize,
    pub width: usize,
    #[serde(skip)]
    pub pixels: Vec<u16>,
    pub bit_depth: u8,
    pub roi: RoiBox,
    pub window: WindowSpec,
    pub flipped: bool,
}

/// A candidate box from an external detector, in the coordinates of the
/// image it was given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

/// External ROI detector (for example a learned breast detector).
pub trait RoiDetector: Sync {
    fn detect(&self, image: &RawImage) -> Result<Vec<Detection>, String>;
}

pub fn detect_roi(
    image: &RawImage,
    config: &PreprocessConfig,
    detector: Option<&dyn RoiDetector>,
) -> Result<RoiBox, PreprocessError> {
    match detector {
        Some(d) => detect_with(image, config.detector_input_size, d),
        None => Ok(rule_based_roi(
            image,
            config.roi_threshold_fraction,
            config.roi_margin_fraction,
        )),
    }
}

fn detect_with(
    image: &RawImage,
    input_size: usize,
    detector: &dyn RoiDetector,
) -> Result<RoiBox, PreprocessError> {
    let scale =
        (input_size as f64 / image.height as f64).min(input_size as f64 / image.width as f64);
    let h = ((image.height as f64 * scale).round() as usize).max(1);
    let w = ((image.width as f64 * scale).round() as usize).max(1);
    let plane = Plane::new(
        image.height,
        image.width,
        image.pixels.iter().map(|&p| p as f64).collect(),
    );
    let small = resize_bilinear(&plane, h, w);
    let mut input = RawImage::new(
        h,
        w,
        small.data.iter().map(|v| v.round() as u16).collect(),
        image.bit_depth,
    );
    input.window_hint = image.window_hint;
    let detections = detector
        .detect(&input)
        .map_err(PreprocessError::DetectorFailure)?;
    let best = detections
        .iter()
        .filter(|d| d.confidence.is_finite())
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
        .ok_or_else(|| PreprocessError::DetectorFailure("no detections".into()))?;
    let (sy, sx) = (
        h as f64 / image.height as f64,
        w as f64 / image.width as f64,
    );
    let x0 = (best.x / sx).floor().clamp(0.0, (image.width - 1) as f64) as usize;
    let y0 = (best.y / sy).floor().clamp(0.0, (image.height - 1) as f64) as usize;
    let x1 = ((best.x + best.w) / sx)
        .ceil()
        .clamp(x0 as f64 + 1.0, image.width as f64) as usize;
    let y1 = ((best.y + best.h) / sy)
        .ceil()
        .clamp(y0 as f64 + 1.0, image.height as f64) as usize;
    Ok(RoiBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
        confidence: best.confidence.clamp(0.0, 1.0),
        source: RoiSource::Learned,
    })
}

/// Threshold at `threshold · max`, keep the largest 4-connected component,
/// dilate its bounding box by `margin` of its extent on each side.
pub fn rule_based_roi(image: &RawImage, threshold: f64, margin: f64) -> RoiBox {
    let (hgt, wid) = (image.height, image.width);
    let max = image.pixels.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return RoiBox::full_frame(hgt, wid);
    }
    let cut = threshold * max as f64;
    let above: Vec<bool> = image.pixels.iter().map(|&p| p as f64 > cut).collect();
    let mut label = vec![u32::MAX; above.len()];
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut queue = VecDeque::new();
    let mut next = 0u32;
    for start in 0..above.len() {
        if !above[start] || label[start] != u32::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let (mut size, mut bbox) = (0usize, [usize::MAX, usize::MAX, 0, 0]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / wid, i % wid);
            size += 1;
            bbox = [
                bbox[0].min(r),
                bbox[1].min(c),
                bbox[2].max(r),
                bbox[3].max(c),
            ];
            let mut visit = |j: usize| {
                if above[j] && label[j] == u32::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - wid);
            }
            if r + 1 < hgt {
                visit(i + wid);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < wid {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bbox));
        }
        next += 1;
    }
    let Some((_, [r0, c0, r1, c1])) = best else {
        return RoiBox::full_frame(hgt, wid);
    };
    let dy = (margin * (r1 - r0 + 1) as f64).round() as usize;
    let dx = (margin * (c1 - c0 + 1) as f64).round() as usize;
    let (y0, x0) = (r0.saturating_sub(dy), c0.saturating_sub(dx));
    let (y1, x1) = ((r1 + dy).min(hgt - 1), (c1 + dx).min(wid - 1));
    RoiBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
        confidence: 1.0,
        source: RoiSource::RuleBased,
    }
}

pub fn crop(image: &RawImage, roi: &RoiBox) -> RawImage {
    let mut pixels = Vec::with_capacity(roi.w * roi.h);
    for r in roi.y..roi.y + roi.h {
        let start = r * image.width + roi.x;
        pixels.extend_from_slice(&image.pixels[start..start + roi.w]);
    }
    RawImage {
        height: roi.h,
        width: roi.w,
        pixels,
        bit_depth: image.bit_depth,
        photometric: image.photometric,
        window_hint: image.window_hint,
    }
}

/// The window to use for `image`: its own hint if present, else full range.
pub fn effective_window(image: &RawImage) -> WindowSpec {
    image
        .window_hint
        .unwrap_or_else(|| WindowSpec::full_range(image.bit_depth))
}

pub fn apply_windowing(
    image: &RawImage,
    window: &WindowSpec,
    out_max: f64,
) -> Result<Plane, PreprocessError> {
    if !(window.width >= 1.0) {
        return Err(PreprocessError::InvalidWindow(window.width));
    }
    let data = image
        .pixels
        .iter()
        .map(|&p| window.map(p as f64, out_max))
        .collect();
    Ok(Plane::new(image.height, image.width, data))
}

/// Mirrors the image when its right half is strictly brighter than its left.
pub fn orient_breast_left(plane: &Plane) -> (Plane, bool) {
    let half = plane.width / 2;
    let (mut left, mut right) = (0.0f64, 0.0f64);
    for row in plane.data.chunks_exact(plane.width) {
        // mirrored summation order keeps symmetric images exactly tied
        for k in 0..half {
            left += row[k];
            right += row[plane.width - 1 - k];
        }
    }
    if right > left {
        (plane.mirrored(), true)
    } else {
        (plane.clone(), false)
    }
}

/// Half-pixel-centred bilinear resampling.
pub fn resize_bilinear(src: &Plane, out_h: usize, out_w: usize) -> Plane {
    if out_h == src.height && out_w == src.width {
        return src.clone();
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(out_h, src.height);
    let cols = axis(out_w, src.width);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = src.get(r0, c0) * (1.0 - fx) + src.get(r0, c1) * fx;
            let bottom = src.get(r1, c0) * (1.0 - fx) + src.get(r1, c1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane::new(out_h, out_w, data)
}

/// Content size after isotropic scaling into the target box.
pub fn scaled_dims(
    height: usize,
    width: usize,
    target_height: usize,
    target_width: usize,
) -> (usize, usize) {
    let scale = (target_height as f64 / height as f64).min(target_width as f64 / width as f64);
    let h = ((height as f64 * scale).round() as usize).clamp(1, target_height);
    let w = ((width as f64 * scale).round() as usize).clamp(1, target_width);
    (h, w)
}

/// Resizes into the target box preserving aspect ratio, then pads right and bottom.
pub fn rescale_pad(plane: &Plane, config: &PreprocessConfig) -> Plane {
    let (th, tw) = (config.target_height, config.target_width);
    let (h, w) = scaled_dims(plane.height, plane.width, th, tw);
    let resized = resize_bilinear(plane, h, w);
    let mut out = Plane::filled(th, tw, config.pad_value as f64);
    for r in 0..h {
        out.data[r * tw..r * tw + w].copy_from_slice(&resized.data[r * w..(r + 1) * w]);
    }
    out
}

/// Runs the whole chain on an already decoded image.
pub fn preprocess_raw(
    image: &RawImage,
    config: &PreprocessConfig,
    detector: Option<&dyn RoiDetector>,
) -> Result<ProcessedImage, PreprocessError> {
    let roi = detect_roi(image, config, detector)?;
    let cropped = crop(image, &roi);
    let window = effective_window(&cropped);
    let out_max = config.out_max();
    let windowed = apply_windowing(&cropped, &window, out_max)?;
    let (oriented, flipped) = orient_breast_left(&windowed);
    let resized =
        if roi.source == RoiSource::FullFrameFallback && image.pixels.iter().all(|&p| p == 0) {
            Plane::filled(
                config.target_height,
                config.target_width,
                config.pad_value as f64,
            )
        } else {
            rescale_pad(&oriented, config)
        };
    let pixels = resized
        .data
        .iter()
        .map(|v| v.round().clamp(0.0, out_max) as u16)
        .collect();
    Ok(ProcessedImage {
        height: config.target_height,
        width: config.target_width,
        pixels,
        bit_depth: config.output_bit_depth,
        roi,
        window,
        flipped,
    })
}

pub fn preprocess_image(
    record: &ImageRecord,
    image_root: Option<&Path>,
    config: &PreprocessConfig,
    detector: Option<&dyn RoiDetector>,
) -> Result<ProcessedImage, PreprocessError> {
    config.validate()?;
    let raw = image::load_image(record, image_root)?;
    preprocess_raw(&raw, config, detector)
}

/// Sidecar written next to every processed PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image_id: String,
    pub patient_id: String,
    pub height: usize,
    pub width: usize,
    pub bit_depth: u8,
    pub roi: RoiBox,
    pub window: WindowSpec,
    pub flipped: bool,
}

pub fn processed_png_path(out_dir: &Path, record: &ImageRecord) -> PathBuf {
    out_dir
        .join(&record.patient_id)
        .join(format!("{}.png", record.image_id))
}

pub fn sidecar_path(out_dir: &Path, record: &ImageRecord) -> PathBuf {
    out_dir
        .join(&record.patient_id)
        .join(format!("{}.json", record.image_id))
}

fn write_outputs(
    out_dir: &Path,
    record: &ImageRecord,
    img: &ProcessedImage,
) -> Result<(), PreprocessError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PreprocessError::Io { path, source }
    };
    let png_path = processed_png_path(out_dir, record);
    let dir = png_path.parent().expect("patient directory");
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    image::write_png(&png_path, img.height, img.width, &img.pixels, img.bit_depth)
        .map_err(io(&png_path))?;
    let sidecar = Sidecar {
        image_id: record.image_id.clone(),
        patient_id: record.patient_id.clone(),
        height: img.height,
        width: img.width,
        bit_depth: img.bit_depth,
        roi: img.roi,
        window: img.window,
        flipped: img.flipped,
    };
    let json_path = sidecar_path(out_dir, record);
    let mut text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    text.push('\n');
    std::fs::write(&json_path, text).map_err(io(&json_path))?;
    Ok(())
}

/// Preprocesses every manifest image into `out_dir` using `workers` threads.
/// Outputs do not depend on the worker count. Returns sidecars in manifest order.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    image_root: Option<&Path>,
    out_dir: &Path,
    config: &PreprocessConfig,
    detector: Option<&dyn RoiDetector>,
    workers: usize,
) -> Result<Vec<Sidecar>, PreprocessError> {
    config.validate()?;
    let run = |r: &ImageRecord| -> Result<Sidecar, PreprocessError> {
        let img = preprocess_image(r, image_root, config, detector)?;
        write_outputs(out_dir, r, &img)?;
        Ok(Sidecar {
            image_id: r.image_id.clone(),
            patient_id: r.patient_id.clone(),
            height: img.height,
            width: img.width,
            bit_depth: img.bit_depth,
            roi: img.roi,
            window: img.window,
            flipped: img.flipped,
        })
    };
    if workers <= 1 {
        return manifest.records().iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PreprocessError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| manifest.records().par_iter().map(run).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_image() -> RawImage {
        let mut px = vec![0u16; 100 * 100];
        for r in 20..=60 {
            for c in 10..=50 {
                px[r * 100 + c] = 1000;
            }
        }
        RawImage::new(100, 100, px, 12)
    }

    #[test]
    fn rule_based_box_on_rectangle() {
        let roi = rule_based_roi(&rect_image(), 0.05, 0.0);
        assert_eq!(
            (roi.x, roi.y, roi.w, roi.h, roi.source),
            (10, 20, 41, 41, RoiSource::RuleBased)
        );
    }

    #[test]
    fn all_zero_takes_fallback() {
        let img = RawImage::new(100, 100, vec![0; 10_000], 12);
        let roi = rule_based_roi(&img, 0.05, 0.02);
        assert_eq!((roi.x, roi.y, roi.w, roi.h), (0, 0, 100, 100));
        assert_eq!(roi.source, RoiSource::FullFrameFallback);
    }

    #[test]
    fn largest_component_wins() {
        let mut px = vec![0u16; 80 * 80];
        for r in 5..45 {
            for c in 30..70 {
                px[r * 80 + c] = 900;
            }
        }
        for r in 60..63 {
            for c in 2..5 {
                px[r * 80 + c] = 4000;
            }
        }
        let roi = rule_based_roi(&RawImage::new(80, 80, px, 12), 0.05, 0.0);
        assert_eq!((roi.x, roi.y, roi.w, roi.h), (30, 5, 40, 40));
    }

    #[test]
    fn window_examples() {
        let w = WindowSpec::linear(2048.0, 4096.0);
        assert_eq!(w.map(2047.5, 1000.0), 500.0);
        let step = WindowSpec::linear(100.0, 1.0);
        assert_eq!(step.map(99.0, 255.0), 0.0);
        assert_eq!(step.map(100.0, 255.0), 255.0);
        let img = RawImage::new(1, 1, vec![0], 8);
        assert!(matches!(
            apply_windowing(&img, &WindowSpec::linear(1.0, 0.5), 1.0),
            Err(PreprocessError::InvalidWindow(_))
        ));
    }

    #[test]
    fn orientation_rules() {
        let right_heavy = Plane::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]);
        let (out, flipped) = orient_breast_left(&right_heavy);
        assert!(flipped);
        assert_eq!(out.data, vec![3.0, 2.0, 1.0, 0.0]);
        let (again, flipped_again) = orient_breast_left(&out);
        assert!(!flipped_again);
        assert_eq!(again, out);
        let symmetric = Plane::new(1, 5, vec![0.1, 0.7, 9.0, 0.7, 0.1]);
        assert!(!orient_breast_left(&symmetric).1);
    }

    #[test]
    fn rescale_examples() {
        let cfg = PreprocessConfig::default();
        assert_eq!(scaled_dims(2000, 1500, 1024, 512), (683, 512));
        let out = rescale_pad(&Plane::filled(2000, 1500, 7.0), &cfg);
        assert_eq!((out.height, out.width), (1024, 512));
        assert_eq!(out.get(682, 511), 7.0);
        assert_eq!(out.get(683, 0), 0.0);
        let cfg = PreprocessConfig {
            target_height: 200,
            target_width: 200,
            ..cfg
        };
        assert_eq!(scaled_dims(100, 100, 200, 200), (200, 200));
        let same = Plane::new(200, 200, (0..40_000).map(f64::from).collect());
        assert_eq!(rescale_pad(&same, &cfg), same);
    }

    #[test]
    fn chain_is_deterministic_and_bounded() {
        let cfg = PreprocessConfig {
            target_height: 64,
            target_width: 32,
            ..Default::default()
        };
        let img = rect_image();
        let a = preprocess_raw(&img, &cfg, None).unwrap();
        let b = preprocess_raw(&img, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.pixels.len(), 64 * 32);
        let zero = preprocess_raw(&RawImage::new(50, 40, vec![0; 2000], 12), &cfg, None).unwrap();
        assert!(zero.pixels.iter().all(|&p| p == cfg.pad_value));
    }

    struct FixedDetector;
    impl RoiDetector for FixedDetector {
        fn detect(&self, image: &RawImage) -> Result<Vec<Detection>, String> {
            assert!(image.height.max(image.width) == 416);
            let d = |x: f64, confidence: f64| Detection {
                x,
                y: 0.0,
                w: 208.0,
                h: 104.0,
                confidence,
            };
            Ok(vec![d(0.0, 0.3), d(208.0, 0.9)])
        }
    }

    struct FailingDetector;
    impl RoiDetector for FailingDetector {
        fn detect(&self, _: &RawImage) -> Result<Vec<Detection>, String> {
            Err("model not loaded".into())
        }
    }

    #[test]
    fn external_detector_box_is_rescaled() {
        let img = RawImage::new(400, 800, vec![1; 400 * 800], 12);
        let cfg = PreprocessConfig::default();
        let roi = detect_roi(&img, &cfg, Some(&FixedDetector)).unwrap();
        assert_eq!(
            (roi.x, roi.y, roi.w, roi.h, roi.source),
            (400, 0, 400, 200, RoiSource::Learned)
        );
        assert_eq!(roi.confidence, 0.9);
        assert!(matches!(
            detect_roi(&img, &cfg, Some(&FailingDetector)),
            Err(PreprocessError::DetectorFailure(_))
        ));
    }
}
